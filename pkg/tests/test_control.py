from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _models import spec as make_spec
from mfcrs.control import (
    BudgetExceeded,
    FeedbackControl,
    HamiltonianInput,
    OptimConfig,
    apply_generator,
    concavity_check,
    hamiltonian_sup,
    maximize_on_box,
    optimize_control,
    pre_hamiltonian,
)
from mfcrs.measure_metric import DiscreteMeasure, Polynomial
from mfcrs.model import ControlBox, make_model
from mfcrs.simulate import SimConfig

BOX = ControlBox.interval(-1.0, 1.0)
X = Polynomial((0.0, 1.0))
X2 = Polynomial((0.0, 0.0, 1.0))


def hin(mu=None, dm=Polynomial((0.0,)), t=0.0):
    return HamiltonianInput(t, mu or DiscreteMeasure.dirac(0.0), 0, (dm,))


def control_drift():
    return make_spec(b=lambda t, x, m, v, i: np.broadcast_to(v[:, :1], x.shape))


class TestFeedbackControl:
    @pytest.mark.parametrize(
        "kind, kw, shape",
        [
            ("constant", {}, (2, 1)),
            ("piecewise", {"time_breaks": (0.3, 0.6)}, (3, 2, 1)),
            ("linear", {"features": (1, 2)}, (2, 3, 1)),
            ("tabular", {"time_breaks": (0.5,), "feature_breaks": (-1.0, 0.0, 1.0)}, (2, 2, 4, 1)),
        ],
    )
    def test_shapes(self, kind, kw, shape):
        c = FeedbackControl.zeros(kind, BOX, 2, **kw)
        assert c.shape == shape and c.n_params == int(np.prod(shape))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            FeedbackControl("spline", np.zeros(2), BOX, 2)

    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.floats(-5, 5), st.floats(0, 1))
    def test_output_in_box(self, p, m, t):
        c = FeedbackControl.zeros("linear", BOX, 2, features=(1,)).with_params(p[:4])
        for i in range(2):
            v = c(t, [m], i)
            assert -1.0 <= v[0] <= 1.0

    def test_linear_evaluation(self):
        c = FeedbackControl("linear", np.array([[[0.1], [0.2]], [[-0.3], [0.5]]]), BOX, 2)
        assert c(0.0, [0.5], 0)[0] == pytest.approx(0.2)
        assert c(0.0, [0.5], 1)[0] == pytest.approx(-0.05)

    def test_piecewise_switches(self):
        c = FeedbackControl("piecewise", np.array([[[0.1]], [[0.7]]]), BOX, 1, time_breaks=(0.5,))
        assert c(0.2, [0.0], 0)[0] == 0.1
        assert c(0.5, [0.0], 0)[0] == 0.7

    def test_tabular_bins(self):
        c = FeedbackControl("tabular", np.array([[[[0.1], [0.2], [0.3]]]]), BOX, 1, feature_breaks=(0.0, 1.0))
        assert [c(0.0, [m], 0)[0] for m in (-1.0, 0.5, 2.0)] == [0.1, 0.2, 0.3]

    def test_per_row_params(self):
        c = FeedbackControl.zeros("constant", BOX, 1)
        v = c.evaluate_rows(0.0, np.zeros((3, 1)), np.zeros(3, dtype=int), params=np.array([[0.1], [0.2], [3.0]]))
        np.testing.assert_allclose(v[:, 0], [0.1, 0.2, 1.0])

    def test_json_round_trip(self):
        c = FeedbackControl.zeros("tabular", BOX, 2, time_breaks=(0.5,), feature_breaks=(0.0,)).with_params(np.linspace(-1, 1, 8))
        again = FeedbackControl.from_json(c.to_json())
        np.testing.assert_array_equal(again.params, c.params)
        assert again.kind == c.kind and again.feature_breaks == c.feature_breaks


class TestApplyGenerator:
    def test_drift_and_diffusion(self):
        L = apply_generator(make_spec(b=1.0, sigma=1.0), 0.0, [0.0], 0, [0.0], X2)
        xs = np.linspace(-2, 2, 9)
        np.testing.assert_allclose(L(xs), 2 * xs + 1, atol=1e-14)

    def test_unit_jump(self):
        L = apply_generator(make_spec(lam=1.0, jump=("point_mass", {"a": 1.0})), 0.0, [0.0], 0, [0.0], X2)
        xs = np.linspace(-2, 2, 9)
        np.testing.assert_allclose(L(xs), 2 * xs + 1, atol=1e-14)

    @given(st.floats(-2, 2), st.floats(0, 3), st.floats(-2, 2), st.floats(-3, 3))
    def test_linear_u(self, b, lam, a, x):
        spec = make_spec(b=b, lam=lam, sigma=0.7, jump=("uniform", {"a": a, "b": a + 1.0}))
        L = apply_generator(spec, 0.0, [0.0], 0, [0.0], X)
        assert L(x) == pytest.approx(b + lam * (a + 0.5), abs=1e-12)


class TestPreHamiltonian:
    def test_zero(self):
        assert pre_hamiltonian(hin(), [0.3], make_spec()) == 0.0

    def test_unit_running_cost(self):
        mu = DiscreteMeasure.from_atoms([[-1, 0.5], [3, 0.5]])
        assert pre_hamiltonian(hin(mu), [0.3], make_spec(f=1.0)) == -1.0

    def test_linear_in_v(self):
        assert pre_hamiltonian(hin(dm=X), [0.4], control_drift()) == pytest.approx(-0.4)

    def test_vectorised(self):
        V = np.linspace(-1, 1, 5)[:, None]
        out = pre_hamiltonian(hin(dm=X), V, control_drift())
        np.testing.assert_allclose(out, -V[:, 0])


class TestHamiltonianSup:
    def test_quadratic(self):
        box = ControlBox.interval(0.0, 1.0)
        val, v = maximize_on_box(lambda V: -V[:, 0] ** 2 + V[:, 0], box, 41)
        assert val == pytest.approx(0.25, abs=1e-12)
        assert v[0] == pytest.approx(0.5, abs=1e-6)

    def test_constant_tie_break(self):
        val, v = maximize_on_box(lambda V: np.full(len(V), 3.0), BOX, 11)
        assert val == 3.0 and v[0] == -1.0

    def test_boundary(self):
        val, v = maximize_on_box(lambda V: V[:, 0], BOX, 11)
        assert (val, v[0]) == (1.0, 1.0)

    def test_bang_bang(self):
        val, v = hamiltonian_sup(hin(dm=X), control_drift())
        assert val == 1.0 and v[0] == -1.0

    @given(st.lists(st.floats(-2, 2), min_size=1, max_size=4), st.floats(-2, 2))
    def test_dominates_grid(self, xs, c):
        spec = make_spec(b=lambda t, x, m, v, i: np.sin(3 * v[:, :1]) + 0 * x, f=lambda t, x, m, v, i: c * v[:, :1] ** 2 + 0 * x)
        mu = DiscreteMeasure.empirical(xs)
        inp = hin(mu, dm=X2)
        val, _ = hamiltonian_sup(inp, spec, 41)
        grid = BOX.grid(41)
        assert np.all(pre_hamiltonian(inp, grid, spec) <= val + 1e-12)

    @given(st.lists(st.floats(0.1, 1.0), min_size=3, max_size=3), st.floats(0.1, 10.0))
    def test_argmax_weight_scaling_invariance(self, w, c):
        xs = np.array([-0.5, 0.2, 1.1])
        spec = make_spec(b=lambda t, x, m, v, i: np.sin(3 * v[:, :1]) * x, f=lambda t, x, m, v, i: v[:, :1] ** 2 + 0 * x)
        w = np.array(w)
        a = DiscreteMeasure(xs, w / w.sum())
        scaled = c * w
        b = DiscreteMeasure(xs, scaled / scaled.sum())
        _, va = hamiltonian_sup(hin(a, dm=X2), spec)
        _, vb = hamiltonian_sup(hin(b, dm=X2), spec)
        np.testing.assert_allclose(va, vb, atol=1e-9)

    def test_closed_form_matches_grid(self):
        spec = make_model("lq_regime", {"rv": 1.5})
        inp = hin(DiscreteMeasure.from_atoms([[0.3, 0.5], [-0.4, 0.5]]), dm=Polynomial((0.1, 0.6)))
        val_c, v_c = hamiltonian_sup(inp, spec)
        val_g, v_g = maximize_on_box(lambda V: pre_hamiltonian(inp, V, spec), spec.A, 41)
        assert val_c == pytest.approx(val_g, abs=1e-9)
        np.testing.assert_allclose(v_c, v_g, atol=1e-5)


class TestConcavity:
    @pytest.mark.parametrize("a, expected", [(1.0, 1.0), (2.0, 2.0)])
    def test_quadratic_modulus(self, a, expected):
        rep = concavity_check(hin(), make_spec(), n_pairs=100, objective=lambda V: -a * np.sum(np.atleast_2d(V) ** 2, axis=1))
        assert rep.modulus == pytest.approx(expected, rel=1e-4)
        assert rep.ok

    def test_linear_fails(self):
        rep = concavity_check(hin(), make_spec(), n_pairs=100, objective=lambda V: np.atleast_2d(V)[:, 0])
        assert abs(rep.modulus) < 1e-6
        assert not rep.ok

    def test_lq_model_is_concave(self):
        spec = make_model("lq_regime", {"rv": 1.0})
        rep = concavity_check(hin(dm=X), spec, n_pairs=50)
        assert rep.modulus == pytest.approx(0.5, rel=1e-4)


class TestOptimize:
    @pytest.fixture
    def sim(self):
        return SimConfig(dt=0.05, N=4, n_mf=8, mc_reps=4, seed=2)

    def test_bang_bang(self, sim):
        spec = make_model("constant", {"control_gain": 1.0, "h_linear": 1.0})
        res = optimize_control("meanfield", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(reps=2, eval_reps=4))
        assert res.cost == pytest.approx(-1.0, rel=0.02)
        assert res.control.flat()[0] == pytest.approx(-1.0, abs=0.02)

    def test_pointwise_minimum(self, sim):
        spec = make_spec(f=lambda t, x, m, v, i: v[:, :1] ** 2 + np.abs(np.sin(5 * t)) + 0 * x)
        res = optimize_control("nagent", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(reps=2, eval_reps=4))
        zero_cost = optimize_control("nagent", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(generations=1, population=1, reps=2, eval_reps=4, init_std=0.0)).cost
        assert res.cost == pytest.approx(zero_cost, rel=0.02)

    def test_cost_independent_of_control(self, sim):
        spec = make_spec(f=1.0)
        res = optimize_control("nagent", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(generations=3, reps=2, eval_reps=4))
        assert res.cost == pytest.approx(1.0)

    def test_history_non_increasing(self, sim):
        spec = make_model("lq_regime", {"sigma": 1.0, "lam": 1.0, "jump": {"kind": "uniform", "a": -1.0, "b": 1.0}})
        res = optimize_control("nagent", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(generations=8, population=16, reps=8, eval_reps=0))
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))
        assert math.isnan(res.cost)

    def test_deterministic(self, sim):
        spec = make_model("lq_regime", {"sigma": 1.0})
        args = ("nagent", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(generations=3, population=8, reps=4, eval_reps=0))
        np.testing.assert_array_equal(optimize_control(*args).control.flat(), optimize_control(*args).control.flat())

    def test_budget(self, sim):
        spec = make_model("lq_regime", {})
        with pytest.raises(BudgetExceeded):
            optimize_control("nagent", spec, 0.0, DiscreteMeasure.dirac(0.0), 0, FeedbackControl.zeros("constant", BOX, 1), sim, OptimConfig(budget_seconds=0.0))
