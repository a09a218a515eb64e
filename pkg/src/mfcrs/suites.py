"""
Self-contained verification suites.  Each returns a :class:`CheckReport`
whose ``detail`` carries the measured quantities and the wall time.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from .control import FeedbackControl, apply_generator
from .experiments import ExperimentConfig, InsufficientSignal, NonPositiveGap, fit_rate, run_poc, run_value_convergence
from .hjb_analysis import (
    CheckReport,
    CylindricalPolynomial,
    derivative_identity_residual,
    dpp_check,
    hjb_residual,
    ito_martingale_test,
    linear_value_function,
    projection_derivative_check,
    remainder_terms,
)
from .measure_metric import (
    DiscreteMeasure,
    Polynomial,
    build_basis,
    check_weights,
    dhat,
    exp_moment,
    make_weights,
    metric_d,
    moments_equal,
)
from .model import jump_law, make_model
from .regime_chain import counting_martingale, sample_path, transition_matrix, validate_generator
from .simulate import SimConfig


def _report(name, statistic, tolerance, passed, t_start, **detail) -> CheckReport:
    detail["seconds"] = round(time.perf_counter() - t_start, 3)
    return CheckReport(name, float(statistic), float(tolerance), bool(passed), detail)


def _random_measure(rng, b: float, delta: float, max_atoms: int = 6) -> DiscreteMeasure:
    # atoms in [-2, 2] keep <mu, e_delta> well inside M_b for b >= e^2
    while True:
        n = int(rng.integers(1, max_atoms + 1))
        mu = DiscreteMeasure(rng.uniform(-2.0, 2.0, n), rng.dirichlet(np.ones(n)))
        if exp_moment(mu, delta) <= b:
            return mu


# ---------------------------------------------------------------------------
# measure metric
# ---------------------------------------------------------------------------


def metric_suite(seed: int = 0, n_triples: int = 1000, b: float = 10.0, D: int = 6, delta: float = 1.0) -> CheckReport:
    """Metric axioms, the moment-equality characterisation of zero, and ``d^2 <= dhat``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    law = jump_law("uniform", {"a": -1.0, "b": 1.0}, delta=delta, D=D)
    basis = build_basis(D, law.moments[:D])
    w = make_weights(basis, b, delta)
    asym = tri = dd = 0.0
    zero_mismatch = 0
    for _ in range(n_triples):
        mu, nu, eta = (_random_measure(rng, b, delta) for _ in range(3))
        d_mn, d_nm = metric_d(mu, nu, basis, w), metric_d(nu, mu, basis, w)
        asym = max(asym, abs(d_mn - d_nm))
        tri = max(tri, d_mn - metric_d(mu, eta, basis, w) - metric_d(eta, nu, basis, w))
        dd = max(dd, d_mn**2 - dhat(mu, nu, basis, w))
        # a split-atom copy of mu has identical moments
        k = int(rng.integers(mu.positions.size))
        w_split = np.append(mu.weights, 0.5 * mu.weights[k])
        w_split[k] *= 0.5
        split = DiscreteMeasure(np.append(mu.positions, mu.positions[k]), w_split)
        for a, c in ((mu, nu), (mu, split)):
            if (metric_d(a, c, basis, w) <= 1e-12) != moments_equal(a, c, basis.max_degree):
                zero_mismatch += 1
    ok = asym == 0.0 and tri <= 1e-12 and zero_mismatch == 0 and dd <= 0.0
    return _report("metric", max(tri, dd), 1e-12, ok, t0, asymmetry=asym, triangle_slack=tri, d2_minus_dhat=dd, zero_mismatches=zero_mismatch, n=n_triples)


def weight_suite(max_D: int = 8, bounds=(1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0), deltas=(0.5, 1.0, 2.0)) -> CheckReport:
    """Direct scan of the weight invariants over a grid of ``(D, b, delta)``."""
    t0 = time.perf_counter()
    failures = []
    n = 0
    for kind, params in (("point_mass", {"a": 1.0}), ("uniform", {"a": -1.0, "b": 1.0})):
        for delta in deltas:
            law = jump_law(kind, params, delta=delta, D=max_D)
            for D in range(1, max_D + 1):
                basis = build_basis(D, law.moments[:D])
                for b in bounds:
                    n += 1
                    flags = check_weights(basis, make_weights(basis, b, delta))
                    if not all(flags.values()):
                        failures.append({"kind": kind, "D": D, "b": b, "delta": delta, **flags})
    return _report("weights", len(failures), 0, not failures, t0, cases=n, failures=failures[:10])


# ---------------------------------------------------------------------------
# regime chain
# ---------------------------------------------------------------------------


def ctmc_suite(seed: int = 0, n_paths: int = 100_000, n_martingale: int = 10_000) -> CheckReport:
    """Closed-form transition law, empirical state law, and the compensated counting martingale."""
    t0 = time.perf_counter()
    P = transition_matrix(validate_generator([[-1.0, 1.0], [1.0, -1.0]]), 1.0)
    closed_err = abs(P[0, 0] - 0.5 * (1.0 + math.exp(-2.0)))

    Q3 = validate_generator([[-1.5, 1.0, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
    rng = np.random.default_rng(seed)
    T = 1.3
    counts = np.zeros(3)
    for _ in range(n_paths):
        counts[sample_path(Q3, 0, 0.0, T, rng).state_at(T)[1]] += 1
    p_hat = counts / n_paths
    p = transition_matrix(Q3, T)[0]
    z_law = float(np.max(np.abs(p_hat - p) / np.sqrt(p * (1 - p) / n_paths)))

    M = np.array([counting_martingale(sample_path(Q3, 0, 0.0, T, rng), Q3, 0, 1, T) for _ in range(n_martingale)])
    z_mart = abs(M.mean()) / (M.std(ddof=1) / math.sqrt(n_martingale))
    ok = closed_err <= 1e-10 and z_law <= 5.0 and z_mart <= 4.0
    return _report("ctmc", closed_err, 1e-10, ok, t0, closed_form_error=closed_err, law_max_z=z_law, martingale_z=float(z_mart))


# ---------------------------------------------------------------------------
# generator and measure calculus
# ---------------------------------------------------------------------------


def _random_cylindrical(rng, n_regimes: int = 1) -> CylindricalPolynomial:
    inner = Polynomial(tuple(rng.normal(size=int(rng.integers(2, 4)))))
    outer = rng.normal(size=(n_regimes, 2, int(rng.integers(2, 5))))
    return CylindricalPolynomial(inner, outer)


def calculus_suite(seed: int = 0, n_instances: int = 100) -> CheckReport:
    """Exact generator action, the linear-derivative identity, and projection derivatives."""
    t0 = time.perf_counter()
    spec = make_model("constant", {"lam": 1.0, "jump": {"kind": "point_mass", "a": 1.0}})
    L = apply_generator(spec, 0.0, np.array([0.0]), 0, np.array([0.0]), Polynomial((0.0, 0.0, 1.0)))
    xs = np.linspace(-3.0, 3.0, 13)
    gen_err = float(np.max(np.abs(L(xs) - (2.0 * xs + 1.0))))

    rng = np.random.default_rng(seed)
    ident = 0.0
    projection = 0.0
    for _ in range(n_instances):
        phi = _random_cylindrical(rng)
        mu, nu = _random_measure(rng, 1e9, 1.0), _random_measure(rng, 1e9, 1.0)
        t = float(rng.uniform())
        ident = max(ident, derivative_identity_residual(phi, t, mu, nu, 0))
        N = int(rng.integers(2, 65))
        projection = max(projection, projection_derivative_check(phi, rng.uniform(-1.5, 1.5, N), 0, t=t)["max_rel_error"])
    ok = gen_err <= 1e-12 and ident <= 1e-10 and projection <= 1e-6
    return _report("calculus", max(ident, projection), 1e-6, ok, t0, generator_error=gen_err, identity_residual=ident, projection_rel_error=projection)


# ---------------------------------------------------------------------------
# HJB residual
# ---------------------------------------------------------------------------


def hjb_residual_suite(b=(0.5, -1.0), Q=((-1.0, 1.0), (2.0, -2.0)), T: float = 1.0, seed: int = 0, n_points: int = 100, eps: float = 1e-3) -> CheckReport:
    """Residual of the ODE-oracle value function on the linear regime model, and its
    response to a ``+eps t`` perturbation of every regime offset."""
    t0 = time.perf_counter()
    Qm = validate_generator([list(r) for r in Q])
    spec = make_model("constant", {"b": list(b), "h_linear": 1.0, "T": T}, n_regimes=Qm.s0)
    V = linear_value_function(b, Qm, T)
    C = V.outer.copy()
    C[:, 1, 0] += eps
    Vp = CylindricalPolynomial(V.inner, C)
    rng = np.random.default_rng(seed)
    worst = 0.0
    weakest = math.inf
    for _ in range(n_points):
        t = float(rng.uniform(0.0, T))
        mu = _random_measure(rng, 1e9, 1.0)
        i = int(rng.integers(Qm.s0))
        worst = max(worst, abs(hjb_residual(V, t, mu, i, spec, Qm)))
        weakest = min(weakest, abs(hjb_residual(Vp, t, mu, i, spec, Qm)))
    ok = worst <= 1e-6 and weakest >= eps / 2
    return _report("hjb_residual", worst, 1e-6, ok, t0, max_residual=worst, min_perturbed_residual=weakest, eps=eps)


# ---------------------------------------------------------------------------
# Ito / Dynkin
# ---------------------------------------------------------------------------


def ito_pairs():
    """Shipped ``(name, spec, phi, Q, rho0)`` combinations for the Ito check.

    Every ``phi`` is affine in ``<mu, f>`` so the statistic is exact for
    empirical measures of any size.
    """
    x = Polynomial((0.0, 1.0))
    drift = make_model("constant", {"b": 1.0, "sigma": 1.0})
    chain_Q = ((-1.0, 1.0), (2.0, -2.0))
    chain = make_model("constant", {}, n_regimes=2)
    indicator = CylindricalPolynomial(x, np.array([[[0.0]], [[1.0]]]))
    mixed_Q = ((-1.0, 1.0), (1.5, -1.5))
    mixed = make_model(
        "constant",
        {"b": [0.5, -1.0], "sigma": [1.0, 0.5], "lam": [1.0, 2.0], "jump": {"kind": "uniform", "a": -1.0, "b": 1.0}},
        n_regimes=2,
    )
    # F_i(t, y) = (1 + i) y + t^2 with f = x^2
    C = np.zeros((2, 3, 2))
    C[:, 2, 0] = 1.0
    C[0, 0, 1], C[1, 0, 1] = 1.0, 2.0
    quad = CylindricalPolynomial(Polynomial((0.0, 0.0, 1.0)), C)
    rho = DiscreteMeasure.from_atoms([[-0.5, 0.5], [0.5, 0.5]])
    return [
        ("linear_drift", drift, CylindricalPolynomial.of(x, [0.0, 1.0]), ((0.0,),), rho),
        ("pure_chain", chain, indicator, chain_Q, rho),
        ("regime_jump_diffusion", mixed, quad, mixed_Q, rho),
    ]


def ito_suite(seed: int = 0, reps: int = 10_000, dt: float = 1e-3, n_particles: int = 8) -> CheckReport:
    """Compensated Ito statistic within 4 SE of zero for every shipped pair."""
    t0 = time.perf_counter()
    cfg = SimConfig(dt=dt, N=1, n_mf=n_particles, mc_reps=reps, seed=seed, block_size=1024)
    out = {}
    worst = 0.0
    for name, spec, phi, Q, rho in ito_pairs():
        ctl = FeedbackControl.zeros("constant", spec.A, spec.n_regimes)
        mean, se = ito_martingale_test(phi, spec, ctl, 0.0, rho, 0, spec.T, cfg, Q=Q)
        z = abs(mean) / se if se > 0 else (0.0 if mean == 0 else math.inf)
        out[name] = {"mean": mean, "se": se, "z": z}
        worst = max(worst, z)
    return _report("ito", worst, 4.0, worst <= 4.0, t0, pairs=out)


# ---------------------------------------------------------------------------
# remainder scaling
# ---------------------------------------------------------------------------


def remainder_suite(seed: int = 0, sizes=(8, 16, 32, 64, 128, 256, 512), draws: int = 32) -> CheckReport:
    """Log-log slope of ``max(|R1|, |R2|)`` over a dyadic sweep of particle numbers."""
    t0 = time.perf_counter()
    spec = make_model(
        "linear_mean_reverting",
        {"a": [0.5, -0.5], "sigma": [0.5, 0.8], "lam": [0.5, 1.0], "lam_mean": 1.0, "jump": {"kind": "uniform", "a": -1.0, "b": 1.0}},
        n_regimes=2,
    )
    phi = CylindricalPolynomial.of(Polynomial((0.0, 1.0, 0.25)), [0.0, 1.0, 1.0, 0.5])
    rng = np.random.default_rng(seed)
    means, ses = [], []
    for N in sizes:
        vals = np.array([max(map(abs, remainder_terms(phi, 0.5, rng.normal(0.0, 1.0, N), 0, [0.3], spec))) for _ in range(draws)])
        means.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(draws)))
    try:
        fit = fit_rate(sizes, means, ses)
    except (InsufficientSignal, NonPositiveGap) as exc:
        return _report("remainder", math.nan, 0.2, False, t0, error=str(exc), means=means, ses=ses)
    ok = -1.2 <= fit.slope <= -0.8
    return _report("remainder", fit.slope, 0.2, ok, t0, slope=fit.slope, half_width=fit.half_width, interval=[-1.2, -0.8], means=means, ses=ses)


# ---------------------------------------------------------------------------
# dynamic programming
# ---------------------------------------------------------------------------


def bang_bang_spec():
    """``b = b_i + v`` on ``[-1, 1]``, ``h(x) = x``, with diffusion, jumps and two regimes."""
    return make_model(
        "constant",
        {"b": [0.2, -0.2], "sigma": 0.5, "lam": 0.5, "control_gain": 1.0, "h_linear": 1.0, "jump": {"kind": "uniform", "a": -1.0, "b": 1.0}},
        n_regimes=2,
    )


def dpp_suite(seed: int = 0, reps: int = 2000, dt: float = 0.01, n_particles: int = 64, theta: float = 0.5) -> CheckReport:
    """Dynamic-programming gap on the four bang-bang controls constant per regime."""
    t0 = time.perf_counter()
    spec = bang_bang_spec()
    Q = ((-1.0, 1.0), (1.0, -1.0))
    controls = [FeedbackControl.constant([[a], [b]], spec.A) for a in (-1.0, 1.0) for b in (-1.0, 1.0)]
    cfg = SimConfig(dt=dt, N=1, n_mf=n_particles, mc_reps=reps, seed=seed, block_size=500)
    res = dpp_check(spec, controls, 0.0, DiscreteMeasure.dirac(0.0), 0, theta, cfg, Q=Q)
    tol = max(3.0 * res["se"], 0.01 * abs(res["value"]))
    return _report("dpp", res["gap"], tol, res["gap"] <= tol, t0, gap=res["gap"], se=res["se"], value=res["value"], split_value=res["split_value"])


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def experiment_report(result) -> CheckReport:
    """Fold an :class:`ExperimentResult` into a single report."""
    fits = [f.to_dict() for f in result.fits]
    worst = max((abs(f["slope"] - f["target"]) if f["slope"] is not None else math.inf) for f in fits)
    return CheckReport(result.name, worst, 0.0, result.passed, {"fits": fits})


def convergence_suite(cfg: ExperimentConfig, log=None) -> tuple[CheckReport, object]:
    res = run_value_convergence(cfg, log)
    return experiment_report(res), res


def degenerate_poc(cfg: ExperimentConfig) -> dict:
    """Coupling check: identical controls and measure-free coefficients.

    With a degenerate control set both optimizers return the same control,
    so shared noise streams must make every particle and control gap
    exactly zero.
    """
    model = {"name": "constant", "params": {"sigma": 1.0, "lam": 0.5, "A": [0.0, 0.0]}}
    res = run_poc(reduced(replace(cfg, model=model)))
    gaps = {s: [r[2] for r in res.rows if r[1] == s] for s in ("particle_gap", "particle_gap_y", "control_gap")}
    return {"collapsed": all(v == 0.0 for g in gaps.values() for v in g), "gaps": gaps}


def poc_suite(cfg: ExperimentConfig, log=None) -> tuple[CheckReport, object]:
    res = run_poc(cfg, log)
    report = experiment_report(res)
    degenerate = degenerate_poc(cfg)
    report = replace(report, passed=report.passed and degenerate["collapsed"], detail={**report.detail, "degenerate": degenerate})
    return report, res


def reduced(cfg: ExperimentConfig, sweep=(4, 8, 16), reps: int = 48, n_mf: int = 256) -> ExperimentConfig:
    """A small copy of ``cfg`` for determinism checks."""
    small_opt = {"population": 8, "elite_fraction": 0.25, "generations": 2, "reps": 4}
    return replace(
        cfg, N_sweep=list(sweep), mc_reps=reps, n_mf=n_mf, mf_reps=4, optimizer=small_opt,
        mf_optimizer=small_opt, mf_opt_particles=64, block_size=16,
    )


def determinism_suite(configs, threads: int = 2) -> CheckReport:
    """Byte-identical CSVs for repeated runs at one and ``threads`` threads."""
    t0 = time.perf_counter()
    runs = {}
    for cfg in configs:
        for runner in (run_value_convergence, run_poc):
            texts = [runner(replace(cfg, threads=k)).csv for k in (1, 1, threads, threads)]
            runs[f"{cfg.model['name']}/{runner.__name__}"] = len(set(texts)) == 1
    ok = all(runs.values())
    return _report("determinism", sum(not v for v in runs.values()), 0, ok, t0, runs=runs, threads=threads)
