from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _models import spec as make_spec
from mfcrs.control import FeedbackControl
from mfcrs.hjb_analysis import (
    CylindricalPolynomial,
    derivative_identity_residual,
    dpp_check,
    hjb_residual,
    ito_martingale_test,
    linear_derivative,
    linear_value_function,
    mean_field_pre_hamiltonian,
    nagent_hamiltonian,
    projection_derivative_check,
    remainder_terms,
    rk4_regime_offsets,
    second_linear_derivative,
)
from mfcrs.measure_metric import DiscreteMeasure, Polynomial
from mfcrs.model import make_model
from mfcrs.regime_chain import transition_matrix, validate_generator
from mfcrs.simulate import SimConfig

X = Polynomial((0.0, 1.0))
Q2 = ((-1.0, 1.0), (2.0, -2.0))


@st.composite
def measures(draw, max_atoms=4):
    n = draw(st.integers(1, max_atoms))
    x = np.array(draw(st.lists(st.floats(-2, 2), min_size=n, max_size=n)))
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    return DiscreteMeasure(x, w / w.sum())


# coefficients are zero or of moderate size; finite differences cannot
# resolve terms many orders below the others
coef = st.one_of(st.just(0.0), st.floats(0.01, 2.0), st.floats(-2.0, -0.01))


@st.composite
def cylindricals(draw):
    inner = draw(st.lists(coef, min_size=2, max_size=4))
    outer = draw(st.lists(coef, min_size=2, max_size=5))
    return CylindricalPolynomial.of(Polynomial(tuple(inner)), outer)


class TestLinearDerivative:
    def test_linear_functional(self):
        f = Polynomial((1.0, -2.0, 0.5))
        phi = CylindricalPolynomial.of(f, [0.0, 1.0])
        assert linear_derivative(phi, 0.0, DiscreteMeasure.dirac(3.0), 0).coefficients == f.coefficients

    def test_square_at_dirac(self):
        phi = CylindricalPolynomial.of(X, [0.0, 0.0, 1.0])
        assert linear_derivative(phi, 0.0, DiscreteMeasure.dirac(2.0), 0).coefficients == (0.0, 4.0)
        assert second_linear_derivative(phi, 0.0, DiscreteMeasure.dirac(2.0), 0) == 2.0

    @given(cylindricals(), measures(), measures(), st.floats(0, 1))
    def test_defining_identity(self, phi, mu, nu, t):
        scale = 1.0 + abs(phi(t, mu, 0)) + abs(phi(t, nu, 0))
        assert derivative_identity_residual(phi, t, mu, nu, 0) <= 1e-10 * scale


class TestHjbResidual:
    def test_static_model(self):
        phi = CylindricalPolynomial.of(Polynomial((0.3, 1.0, -0.2)), [1.0, 2.0, 0.5])
        mu = DiscreteMeasure.from_atoms([[0.1, 0.4], [-1.0, 0.6]])
        assert hjb_residual(phi, 0.4, mu, 0, make_spec(), ((0.0,),)) == 0.0

    def test_offsets_match_transition_oracle(self):
        # c(t) = int_t^T P(s - t) b ds, with P from uniformization
        b = np.array([0.5, -1.0])
        grid, c = rk4_regime_offsets(b, Q2, 1.0, dt=1e-3)
        Q = validate_generator(Q2)
        z, w = np.polynomial.legendre.leggauss(40)
        for k in (0, 250, 700):
            t = grid[k]
            s = 0.5 * (1.0 - t) * (z + 1.0) + t
            exact = 0.5 * (1.0 - t) * sum(wi * transition_matrix(Q, si - t) @ b for si, wi in zip(s, w))
            np.testing.assert_allclose(c[k], exact, atol=1e-10)

    def test_linear_model(self, rng):
        spec = make_model("constant", {"b": [0.5, -1.0], "h_linear": 1.0}, n_regimes=2)
        V = linear_value_function([0.5, -1.0], Q2, 1.0)
        for _ in range(100):
            mu = DiscreteMeasure(rng.uniform(-2, 2, 3), rng.dirichlet(np.ones(3)))
            assert abs(hjb_residual(V, float(rng.uniform()), mu, int(rng.integers(2)), spec, Q2)) <= 1e-6

    def test_terminal_condition(self):
        V = linear_value_function([0.5, -1.0], Q2, 1.0)
        mu = DiscreteMeasure.from_atoms([[0.3, 0.5], [1.1, 0.5]])
        for i in range(2):
            assert V(1.0, mu, i) == pytest.approx(0.7, abs=1e-9)

    def test_perturbation_detected(self, rng):
        eps = 1e-3
        spec = make_model("constant", {"b": [0.5, -1.0], "h_linear": 1.0}, n_regimes=2)
        V = linear_value_function([0.5, -1.0], Q2, 1.0)
        C = V.outer.copy()
        C[:, 1, 0] += eps
        Vp = CylindricalPolynomial(V.inner, C)
        for _ in range(20):
            mu = DiscreteMeasure.dirac(float(rng.normal()))
            assert abs(hjb_residual(Vp, float(rng.uniform()), mu, int(rng.integers(2)), spec, Q2)) >= eps / 2


class TestIto:
    def test_frozen_exact(self):
        phi = CylindricalPolynomial.of(Polynomial((0.0, 1.0, 1.0)), [0.0, 1.0, 3.0])
        spec = make_spec()
        cfg = SimConfig(dt=0.1, N=1, n_mf=5, mc_reps=6)
        mean, se = ito_martingale_test(phi, spec, FeedbackControl.zeros("constant", spec.A, 1), 0.0, DiscreteMeasure.from_atoms([[1, 0.5], [2, 0.5]]), 0, 1.0, cfg)
        assert mean == 0.0 and se == 0.0

    def test_linear_drift(self):
        spec = make_spec(b=1.0, sigma=1.0)
        cfg = SimConfig(dt=0.01, N=1, n_mf=4, mc_reps=2000, seed=4)
        mean, se = ito_martingale_test(CylindricalPolynomial.of(X, [0.0, 1.0]), spec, FeedbackControl.zeros("constant", spec.A, 1), 0.0, DiscreteMeasure.dirac(0.0), 0, 1.0, cfg)
        assert abs(mean) <= 4 * se

    def test_pure_chain(self):
        spec = make_spec(n_regimes=2)
        phi = CylindricalPolynomial(X, np.array([[[0.0]], [[1.0]]]))
        cfg = SimConfig(dt=0.01, N=1, n_mf=1, mc_reps=2000, seed=5)
        mean, se = ito_martingale_test(phi, spec, FeedbackControl.zeros("constant", spec.A, 2), 0.0, DiscreteMeasure.dirac(0.0), 0, 0.8, cfg, Q=Q2)
        assert se > 0 and abs(mean) <= 4 * se


class TestProjection:
    def test_mean(self):
        phi = CylindricalPolynomial.of(X, [0.0, 1.0])
        rep = projection_derivative_check(phi, [0.3, -1.0, 2.0, 5.0], 0)
        np.testing.assert_allclose(rep["analytic_first"], 0.25)
        assert rep["first_rel_error"] <= 1e-9

    def test_square_hand_value(self):
        phi = CylindricalPolynomial.of(X, [0.0, 0.0, 1.0])
        rep = projection_derivative_check(phi, [1.0, 3.0], 0)
        assert rep["analytic_first"][0] == pytest.approx(2.0)
        assert rep["max_rel_error"] <= 1e-9

    @given(cylindricals(), st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=64), st.floats(0, 1))
    def test_random(self, phi, x, t):
        assert projection_derivative_check(phi, x, 0, t=t)["max_rel_error"] <= 1e-6


class TestRemainders:
    @pytest.fixture
    def spec(self):
        return make_model(
            "linear_mean_reverting",
            {"sigma": 0.7, "lam": 1.3, "lam_mean": 0.5, "jump": {"kind": "uniform", "a": -1.0, "b": 1.0}},
        )

    def test_linear_F_vanishes(self, spec, rng):
        phi = CylindricalPolynomial.of(Polynomial((0.0, 1.0, 0.3)), [2.0, -1.5])
        assert remainder_terms(phi, 0.3, rng.normal(size=10), 0, [0.2], spec) == (0.0, 0.0)

    def test_no_jumps_halves_with_n(self, rng):
        spec = make_spec(sigma=0.8)
        phi = CylindricalPolynomial.of(X, [0.0, 0.0, 1.0])
        x = rng.normal(size=7)
        r1, r2 = remainder_terms(phi, 0.0, x, 0, [0.0], spec)
        r1d, r2d = remainder_terms(phi, 0.0, np.concatenate([x, x]), 0, [0.0], spec)
        assert r2 == 0.0 and r2d == 0.0
        # F = y^2, f = x: R1 = -(sigma^2 / 2) * 2 / N
        assert r1 == pytest.approx(-0.64 / 7, rel=1e-14)
        assert r1d == pytest.approx(r1 / 2, rel=1e-14)

    @given(cylindricals(), st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=20), st.floats(-1, 1))
    def test_hamiltonian_decomposition(self, phi, x, v):
        spec = make_model(
            "linear_mean_reverting",
            {"sigma": 0.7, "lam": 1.3, "lam_mean": 0.5, "jump": {"kind": "uniform", "a": -1.0, "b": 1.0}},
        )
        r1, r2 = remainder_terms(phi, 0.4, x, 0, [v], spec)
        direct = nagent_hamiltonian(phi, 0.4, x, 0, [v], spec)
        mf = mean_field_pre_hamiltonian(phi, 0.4, x, 0, [v], spec)
        assert direct == pytest.approx(mf + r1 + r2, abs=1e-9 * (1 + abs(direct)))

    def test_scaling(self, spec):
        phi = CylindricalPolynomial.of(Polynomial((0.0, 1.0, 0.25)), [0.0, 1.0, 1.0])
        rng = np.random.default_rng(0)
        sizes = [16, 64, 256]
        means = [np.mean([max(map(abs, remainder_terms(phi, 0.5, rng.normal(size=N), 0, [0.3], spec))) for _ in range(16)]) for N in sizes]
        slope = np.polyfit(np.log(sizes), np.log(means), 1)[0]
        assert -1.2 <= slope <= -0.8


class TestDpp:
    @pytest.fixture
    def cfg(self):
        return SimConfig(dt=0.05, N=1, n_mf=16, mc_reps=200, seed=1)

    def test_single_control(self, cfg):
        spec = make_model("constant", {"sigma": 1.0, "control_gain": 1.0, "h_linear": 1.0})
        res = dpp_check(spec, [FeedbackControl.constant([[0.3]], spec.A)], 0.0, DiscreteMeasure.dirac(0.0), 0, 0.5, cfg)
        assert res["gap"] <= 3 * res["se"]

    def test_control_free(self, cfg):
        spec = make_model("constant", {"sigma": 1.0, "lam": 1.0, "f": 1.0, "h_linear": 1.0}, n_regimes=2)
        ctl = FeedbackControl.zeros("constant", spec.A, 2)
        res = dpp_check(spec, [ctl], 0.0, DiscreteMeasure.dirac(0.0), 0, 0.3, cfg, Q=Q2)
        assert res["gap"] <= 3 * res["se"]

    def test_bang_bang_deterministic(self, cfg):
        spec = make_model("constant", {"control_gain": 1.0, "h_linear": 1.0})
        controls = [FeedbackControl.constant([[a]], spec.A) for a in (-1.0, 1.0)]
        res = dpp_check(spec, controls, 0.0, DiscreteMeasure.dirac(0.0), 0, 0.5, cfg)
        assert res["value"] == pytest.approx(-1.0, abs=1e-12)
        assert res["gap"] <= 0.01 * abs(res["value"])

    def test_class_size(self, cfg):
        spec = make_model("constant", {})
        with pytest.raises(ValueError):
            dpp_check(spec, [], 0.0, DiscreteMeasure.dirac(0.0), 0, 0.5, cfg)
