from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfcrs.measure_metric import DiscreteMeasure
from mfcrs.model import (
    MODEL_LIBRARY,
    ControlBox,
    ModelSpec,
    UnsupportedFamily,
    jump_law,
    make_model,
    validate_assumptions,
)


def _const(c):
    return lambda t, x, m, v, i: np.full((x.shape[0], 1), c)


def custom_spec(b=None, C0=1.0, kappa0=1.0):
    zero = _const(0.0)
    return ModelSpec(
        b=b or _const(0.5),
        sigma=_const(0.5),
        lam=_const(0.5),
        f=zero,
        h=lambda t, x, m, i: np.zeros((x.shape[0], 1)),
        A=ControlBox.interval(-1.0, 1.0),
        jump=jump_law("point_mass", {"a": 0.0}),
        T=1.0,
        C0=C0,
        kappa0=kappa0,
    )


class TestJumpLaw:
    def test_point_mass_zero(self):
        law = jump_law("point_mass", {"a": 0.0}, delta=1.0, D=4)
        assert law.exp_moment == 1.0
        assert law.moments == (0.0, 0.0, 0.0, 0.0)

    def test_point_mass_one(self):
        law = jump_law("point_mass", {"a": 1.0}, delta=1.0, D=3)
        assert law.exp_moment == pytest.approx(math.e, rel=1e-14)
        assert law.moments == pytest.approx((1.0, 0.5, 1.0 / 6.0), rel=1e-14)

    def test_uniform(self):
        law = jump_law("uniform", {"a": -1.0, "b": 1.0}, delta=1.0, D=2)
        assert law.exp_moment == pytest.approx(math.e - 1.0, rel=1e-12)
        assert law.moments == pytest.approx((0.0, 1.0 / 6.0), abs=1e-14)

    @given(st.floats(-3, 0), st.floats(0.1, 3), st.floats(0.2, 2.0))
    def test_uniform_exp_moment_quadrature(self, a, width, delta):
        b = a + width
        law = jump_law("uniform", {"a": a, "b": b}, delta=delta, D=2)
        z, w = np.polynomial.legendre.leggauss(200)
        # split at 0 where |y| has a kink
        total = 0.0
        for lo, hi in ((a, min(b, 0.0)), (max(a, 0.0), b)):
            if hi > lo:
                y = 0.5 * (hi - lo) * z + 0.5 * (hi + lo)
                total += 0.5 * (hi - lo) * np.dot(w, np.exp(delta * np.abs(y)))
        assert law.exp_moment == pytest.approx(total / (b - a), rel=1e-10)

    def test_finite_discrete(self):
        law = jump_law("finite_discrete", {"atoms": [[-1.0, 0.5], [2.0, 0.5]]}, delta=1.0, D=2)
        assert law.moments == pytest.approx((0.5, 0.5 * (0.5 + 2.0)), rel=1e-14)
        assert law.exp_moment == pytest.approx(0.5 * (math.e + math.e**2), rel=1e-14)

    def test_unsupported(self):
        with pytest.raises(UnsupportedFamily):
            jump_law("cauchy", {})

    @pytest.mark.parametrize(
        "kind, params",
        [("uniform", {"a": -1.0, "b": 2.0}), ("finite_discrete", {"atoms": [[-1.0, 0.3], [0.5, 0.7]]}), ("point_mass", {"a": 0.7})],
    )
    def test_sampler_moments(self, kind, params, rng):
        law = jump_law(kind, params, D=4)
        y = law.sample(rng, 100_000)
        for k in range(1, 5):
            target = math.factorial(k) * law.moments[k - 1]
            se = np.std(y**k, ddof=1) / math.sqrt(y.size)
            assert abs(np.mean(y**k) - target) <= 4 * se + 1e-12

    @pytest.mark.parametrize("kind, params", [("uniform", {"a": -1.0, "b": 2.0}), ("finite_discrete", {"atoms": [[-1.0, 0.3], [0.5, 0.7]]})])
    def test_quadrature_integrates_polynomials(self, kind, params):
        law = jump_law(kind, params, D=6)
        nodes, w = law.quadrature(16)
        for k in range(1, 7):
            assert np.dot(w, nodes**k) == pytest.approx(math.factorial(k) * law.moments[k - 1], rel=1e-12, abs=1e-14)


class TestControlBox:
    def test_clamp(self):
        box = ControlBox.interval(-1.0, 2.0)
        np.testing.assert_array_equal(box.clamp(np.array([[-3.0], [0.5], [5.0]])), [[-1.0], [0.5], [2.0]])

    def test_grid_spans_box(self):
        g = ControlBox.interval(-1.0, 1.0).grid(5)
        np.testing.assert_allclose(g[:, 0], [-1.0, -0.5, 0.0, 0.5, 1.0])


class TestValidateAssumptions:
    def test_constant_clean(self):
        rep = validate_assumptions(custom_spec(), n_samples=400)
        assert rep.ok
        assert all(v == 0.0 for v in rep.lipschitz.values())

    def test_unbounded_drift(self):
        rep = validate_assumptions(custom_spec(b=lambda t, x, m, v, i: 2.0 * x), n_samples=200)
        assert rep.bound_violations

    def test_measure_lipschitz_ratio(self):
        spec = custom_spec(b=lambda t, x, m, v, i: 3.0 * m[:, :1], C0=10.0, kappa0=1.0)
        rep = validate_assumptions(spec, n_samples=800)
        assert rep.lipschitz["b"] == pytest.approx(3.0, rel=1e-6)
        assert any("b Lipschitz" in s for s in rep.lipschitz_violations)

    @pytest.mark.parametrize("name", sorted(MODEL_LIBRARY))
    def test_library_models_bounded(self, name):
        spec = make_model(name, {}, n_regimes=2)
        rep = validate_assumptions(spec, n_samples=300)
        assert not [v for v in rep.bound_violations if "C0" in v]

    def test_report_dict(self):
        d = validate_assumptions(custom_spec(), n_samples=50).to_dict()
        assert d["ok"] is True and d["n_samples"] == 50


class TestLibrary:
    def test_unknown(self):
        with pytest.raises(ValueError):
            make_model("nope")

    def test_features_are_caller_moments(self):
        seen = []

        def b(t, x, m, v, i):
            seen.append(m.copy())
            return np.zeros((x.shape[0], 1))

        spec = custom_spec(b=b)
        spec = ModelSpec(**{**spec.__dict__, "moment_index": (1, 2, 3)})
        mu = DiscreteMeasure.from_atoms([[-1.0, 0.25], [2.0, 0.75]])
        m = spec.measure_features(mu)
        spec.b(0.0, mu.positions[None, :], m, np.zeros((1, 1)), np.zeros(1, dtype=int))
        np.testing.assert_allclose(seen[0][0], [pairing_k(mu, k) for k in (1, 2, 3)], rtol=1e-14)

    def test_lq_closed_form_control(self):
        spec = make_model("lq_regime", {"target": 0.5}, n_regimes=2)
        ctl = spec.optimal_control("meanfield", 0.0, DiscreteMeasure.dirac(0.0), 0)
        assert ctl is not None
        np.testing.assert_allclose(ctl.flat(), 0.5)

    def test_lq_argmax_matches_grid(self):
        from mfcrs.control import HamiltonianInput, maximize_on_box, pre_hamiltonian
        from mfcrs.measure_metric import Polynomial

        spec = make_model("lq_regime", {"rv": 2.0}, n_regimes=1)
        inp = HamiltonianInput(0.2, DiscreteMeasure.from_atoms([[0.3, 0.5], [-0.1, 0.5]]), 0, (Polynomial((0.0, 0.7)),))
        v_closed = spec.hamiltonian_argmax(inp.t, inp.mu, inp.i0, inp.dm[0])
        _, v_grid = maximize_on_box(lambda v: pre_hamiltonian(inp, v, spec), spec.A, 201)
        np.testing.assert_allclose(v_closed, v_grid, atol=1e-6)


def pairing_k(mu, k):
    return float(np.dot(mu.weights, mu.positions**k))
