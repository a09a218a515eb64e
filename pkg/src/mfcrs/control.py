"""
Feedback controls, the pre-Hamiltonian and its supremum, concavity
diagnostics and cross-entropy optimisation of parameterised controls.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .measure_metric import DiscreteMeasure, Polynomial, jump_image
from .model import ControlBox, ModelSpec
from .simulate import SimConfig, cost_estimate, simulate_meanfield, simulate_nagent

KINDS = ("constant", "piecewise", "linear", "tabular")


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class FeedbackControl:
    """Deterministic feedback ``(t, moment features, regime) -> v`` clamped to ``A``.

    Parameter layouts (``d`` = control dimension, ``s`` = regimes):

    * ``constant``: ``(s, d)``
    * ``piecewise``: ``(n_t, s, d)`` with interior time breakpoints
    * ``linear``: ``(s, 1 + len(features), d)``, intercept then slopes
    * ``tabular``: ``(n_t, s, n_f, d)`` binned on time and on the first feature
    """

    kind: str
    params: NDArray[np.float64]
    box: ControlBox
    n_regimes: int
    features: tuple[int, ...] = (1,)
    time_breaks: tuple[float, ...] = ()
    feature_breaks: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown control representation {self.kind!r}")
        p = np.asarray(self.params, dtype=np.float64).reshape(self.shape)
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def shape(self) -> tuple[int, ...]:
        s, d = self.n_regimes, self.box.dim
        if self.kind == "constant":
            return (s, d)
        if self.kind == "piecewise":
            return (len(self.time_breaks) + 1, s, d)
        if self.kind == "linear":
            return (s, 1 + len(self.features), d)
        return (len(self.time_breaks) + 1, s, len(self.feature_breaks) + 1, d)

    @property
    def n_params(self) -> int:
        return int(np.prod(self.shape))

    @classmethod
    def constant(cls, values, box: ControlBox) -> "FeedbackControl":
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        return cls("constant", v, box, v.shape[0])

    @classmethod
    def zeros(cls, kind: str, box: ControlBox, n_regimes: int, **kw) -> "FeedbackControl":
        return cls(kind, np.zeros(_shape_size(kind, box, n_regimes, kw)), box, n_regimes, **kw)

    def with_params(self, flat) -> "FeedbackControl":
        return replace(self, params=np.asarray(flat, dtype=np.float64).reshape(self.shape))

    def flat(self) -> NDArray[np.float64]:
        return self.params.ravel().copy()

    def evaluate_rows(self, t: float, moments: NDArray[np.float64], regimes, params=None) -> NDArray[np.float64]:
        """Control values for each row.

        ``moments[:, k-1]`` must hold ``<mu, x^k>``.  ``params`` optionally
        gives one flat parameter vector per row.
        """
        regimes = np.asarray(regimes, dtype=np.int64)
        R = regimes.shape[0]
        rows = np.arange(R)
        p = self.params[None] if params is None else np.asarray(params).reshape((R, *self.shape))
        sel = np.zeros(R, dtype=np.int64) if params is None else rows
        if self.kind == "constant":
            v = p[sel, regimes]
        elif self.kind == "piecewise":
            k = int(np.searchsorted(self.time_breaks, t, side="right"))
            v = p[sel, k, regimes]
        elif self.kind == "linear":
            feats = np.asarray(moments)[:, [k - 1 for k in self.features]]
            coef = p[sel, regimes]  # (R, 1+K, d)
            v = coef[:, 0] + np.einsum("rk,rkd->rd", feats, coef[:, 1:])
        else:
            k = int(np.searchsorted(self.time_breaks, t, side="right"))
            f0 = np.asarray(moments)[:, self.features[0] - 1]
            fb = np.searchsorted(self.feature_breaks, f0, side="right")
            v = p[sel, k, regimes, fb]
        return self.box.clamp(v)

    def __call__(self, t: float, moments, regime: int) -> NDArray[np.float64]:
        return self.evaluate_rows(t, np.atleast_2d(moments), np.array([regime]))[0]

    def to_dict(self) -> dict:
        return {
            "representation": self.kind,
            "parameters": self.params.ravel().tolist(),
            "features": list(self.features),
            "n_regimes": self.n_regimes,
            "box": {"low": list(self.box.low), "high": list(self.box.high)},
            "time_breaks": list(self.time_breaks),
            "feature_breaks": list(self.feature_breaks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedbackControl":
        box = ControlBox(tuple(d["box"]["low"]), tuple(d["box"]["high"]))
        return cls(
            d["representation"],
            np.asarray(d["parameters"], dtype=np.float64),
            box,
            int(d["n_regimes"]),
            tuple(d.get("features", (1,))),
            tuple(d.get("time_breaks", ())),
            tuple(d.get("feature_breaks", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FeedbackControl":
        return cls.from_dict(json.loads(text))


def _shape_size(kind, box, n_regimes, kw) -> int:
    s, d = n_regimes, box.dim
    nt = len(kw.get("time_breaks", ())) + 1
    if kind == "constant":
        return s * d
    if kind == "piecewise":
        return nt * s * d
    if kind == "linear":
        return s * (1 + len(kw.get("features", (1,)))) * d
    return nt * s * (len(kw.get("feature_breaks", ())) + 1) * d


# ---------------------------------------------------------------------------
# Generator and pre-Hamiltonian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianInput:
    """Point ``(t, mu, i0)`` with the linear derivative as one polynomial per regime."""

    t: float
    mu: DiscreteMeasure
    i0: int
    dm: tuple[Polynomial, ...]

    def __post_init__(self):
        if not 0 <= self.i0 < len(self.dm):
            raise ValueError("need one derivative polynomial per regime")


def _eval_coef(fn, t, x, feats, v, i):
    return np.broadcast_to(fn(t, x, feats, v, i), x.shape)


def apply_generator(spec: ModelSpec, t: float, features, i0: int, v, u: Polynomial) -> Callable:
    """Return ``x -> (L u)(x)`` with the jump integral taken exactly.

    ``int (u(x+y) - u(x)) gamma(dy) = sum_k m_k u^(k)(x)`` for polynomial
    ``u``, so no quadrature is needed.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    vv = np.atleast_2d(np.asarray(v, dtype=np.float64))
    du, d2u = u.deriv(1), u.deriv(2)
    g = jump_image(u, spec.jump.moments)
    i = np.array([i0])

    def evaluate(x):
        xs = np.atleast_1d(np.asarray(x, dtype=np.float64))[None, :]
        b = _eval_coef(spec.b, t, xs, feats, vv, i)
        s = _eval_coef(spec.sigma, t, xs, feats, vv, i)
        lam = _eval_coef(spec.lam, t, xs, feats, vv, i)
        out = b * du(xs) + 0.5 * s**2 * d2u(xs) + lam * g(xs)
        return out[0] if np.ndim(x) else float(out[0, 0])

    return evaluate


def pre_hamiltonian(inp: HamiltonianInput, v, spec: ModelSpec) -> NDArray[np.float64] | float:
    """``-<mu, f(t, ., mu, v, i0) + L[D_m]>`` for one or many ``v``.

    ``v`` of shape ``(d,)`` returns a float; shape ``(n, d)`` returns ``n`` values.
    """
    v_arr = np.asarray(v, dtype=np.float64)
    single = v_arr.ndim <= 1
    V = v_arr.reshape(1, -1) if single else v_arr
    n = V.shape[0]
    mu = inp.mu
    x = np.broadcast_to(mu.positions, (n, mu.positions.size))
    feats = np.repeat(spec.measure_features(mu), n, axis=0)
    i = np.full(n, inp.i0)
    u = inp.dm[inp.i0]
    du, d2u, g = u.deriv(1)(mu.positions), u.deriv(2)(mu.positions), jump_image(u, spec.jump.moments)(mu.positions)
    b = _eval_coef(spec.b, inp.t, x, feats, V, i)
    s = _eval_coef(spec.sigma, inp.t, x, feats, V, i)
    lam = _eval_coef(spec.lam, inp.t, x, feats, V, i)
    f = _eval_coef(spec.f, inp.t, x, feats, V, i)
    integrand = f + b * du + 0.5 * s**2 * d2u + lam * g
    out = -(integrand @ mu.weights)
    return float(out[0]) if single else out


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _golden(fn, lo: float, hi: float, iters: int = 60) -> float:
    """Maximiser of a unimodal ``fn`` on ``[lo, hi]``."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def maximize_on_box(objective: Callable, box: ControlBox, resolution: int) -> tuple[float, NDArray[np.float64]]:
    """Grid search with lowest-index tie-break, then one golden pass per coordinate.

    ``objective`` maps an ``(n, d)`` array of controls to ``n`` values.  The
    refinement is accepted only when strictly better than the grid maximum.
    """
    if resolution < 2:
        raise ValueError("grid_resolution must be at least 2")
    grid = box.grid(resolution)
    vals = np.asarray(objective(grid), dtype=np.float64)
    k = int(np.argmax(vals))
    best_v, best = grid[k].copy(), float(vals[k])
    steps = [(hi - lo) / (resolution - 1) for lo, hi in zip(box.low, box.high)]
    cand = best_v.copy()
    for c, h in enumerate(steps):
        lo = max(box.low[c], cand[c] - h)
        hi = min(box.high[c], cand[c] + h)
        if hi <= lo:
            continue

        def along(s, c=c):
            w = cand.copy()
            w[c] = s
            return float(objective(w[None, :])[0])

        cand[c] = _golden(along, lo, hi)
    val = float(objective(cand[None, :])[0])
    if val > best:
        return val, cand
    return best, best_v


def hamiltonian_sup(inp: HamiltonianInput, spec: ModelSpec, grid_resolution: int = 41) -> tuple[float, NDArray[np.float64]]:
    """``sup_{v in A} H^v`` and a maximiser."""
    if spec.concave_quadratic:
        v = np.asarray(spec.hamiltonian_argmax(inp.t, inp.mu, inp.i0, inp.dm[inp.i0]), dtype=np.float64)
        return float(pre_hamiltonian(inp, v, spec)), v
    return maximize_on_box(lambda V: pre_hamiltonian(inp, V, spec), spec.A, grid_resolution)


@dataclass
class ConcavityReport:
    modulus: float
    n_pairs: int
    ok: bool

    def to_dict(self) -> dict:
        return {"check_name": "concavity", "statistic": self.modulus, "tolerance": 0.0, "pass": self.ok, "n_pairs": self.n_pairs}


def concavity_check(
    inputs: HamiltonianInput | Sequence[HamiltonianInput],
    spec: ModelSpec,
    n_pairs: int = 200,
    seed=0,
    objective: Callable | None = None,
    fd_step: float = 1e-5,
) -> ConcavityReport:
    """Smallest observed strong-concavity modulus of ``v -> H^v``.

    For each pair the modulus is
    ``(H(v1) + grad H(v1).(v2 - v1) - H(v2)) / |v2 - v1|^2`` with the
    gradient by central differences.  A non-positive minimum means the
    uniform concavity assumption fails on the sample.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    if isinstance(inputs, HamiltonianInput):
        inputs = [inputs]
    rng = np.random.default_rng(seed)
    box = spec.A
    d = box.dim
    lo, hi = np.asarray(box.low), np.asarray(box.high)
    worst = math.inf
    for k in range(n_pairs):
        inp = inputs[k % len(inputs)]
        H = objective if objective is not None else (lambda V, inp=inp: pre_hamiltonian(inp, V, spec))
        v1 = rng.uniform(lo + fd_step, hi - fd_step)
        v2 = rng.uniform(lo, hi)
        diff = v2 - v1
        nrm2 = float(diff @ diff)
        if nrm2 < 1e-8:
            continue
        shifts = np.eye(d) * fd_step
        up = H(v1[None, :] + shifts)
        dn = H(v1[None, :] - shifts)
        grad = (np.asarray(up) - np.asarray(dn)) / (2 * fd_step)
        h1, h2 = np.asarray(H(np.stack([v1, v2])), dtype=np.float64)
        lam = (h1 + grad @ diff - h2) / nrm2
        worst = min(worst, float(lam))
    return ConcavityReport(worst, n_pairs, worst > 0)


# ---------------------------------------------------------------------------
# Cross-entropy optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    population: int = 64
    elite_fraction: float = 0.125
    generations: int = 30
    reps: int = 64
    eval_reps: int = 512
    init_std: float | None = None
    min_std: float = 1e-4
    budget_seconds: float = math.inf
    max_rows: int = 2_000_000


@dataclass
class OptimResult:
    control: FeedbackControl
    cost: float
    se: float
    history: list[float] = field(default_factory=list)


def _param_bounds(template: FeedbackControl) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Bounds used to clip sampled parameters; slopes stay free."""
    lo = np.broadcast_to(np.asarray(template.box.low), template.shape).astype(np.float64)
    hi = np.broadcast_to(np.asarray(template.box.high), template.shape).astype(np.float64)
    lo, hi = lo.copy(), hi.copy()
    if template.kind == "linear":
        lo[:, 1:, :] = -np.inf
        hi[:, 1:, :] = np.inf
    return lo.ravel(), hi.ravel()


def _evaluate(problem, template, params, spec, t0, init, i0, sim: SimConfig, Q, opt: OptimConfig):
    runner = simulate_nagent if problem == "nagent" else simulate_meanfield
    n_part = sim.N if problem == "nagent" else sim.n_mf
    chunk = max(1, opt.max_rows // max(1, sim.mc_reps * n_part))
    out = np.empty(len(params))
    for s in range(0, len(params), chunk):
        recs = runner(t0, init, i0, template, spec, sim, Q=Q, params=params[s : s + chunk])
        out[s : s + chunk] = [float(np.mean(r.cost)) for r in recs]
    return out


def optimize_control(
    problem: str,
    spec: ModelSpec,
    t0: float,
    init,
    i0: int,
    template: FeedbackControl,
    sim: SimConfig,
    opt: OptimConfig = OptimConfig(),
    Q=((0.0,),),
) -> OptimResult:
    """Minimise the expected cost over the parameters of ``template`` by CEM.

    Every candidate in every generation is evaluated on the same random
    numbers, and the best candidate so far is carried into each new
    population, so the best cost is non-increasing across generations.  The
    returned cost is re-estimated on fresh random numbers.
    """
    if problem not in ("nagent", "meanfield"):
        raise ValueError("problem must be 'nagent' or 'meanfield'")
    if template.n_params > 64:
        raise ValueError("at most 64 control parameters are supported")
    start = time.monotonic()
    rng = np.random.default_rng(np.random.SeedSequence([sim.seed, 77]))
    train = replace(sim, mc_reps=opt.reps)
    lo, hi = _param_bounds(template)
    width = np.where(np.isfinite(hi - lo), hi - lo, 2.0)
    # the template's own parameters are the initial search centre
    mean = np.clip(template.flat(), lo, hi)
    std = np.full_like(mean, opt.init_std) if opt.init_std is not None else 0.5 * width
    n_elite = max(1, int(round(opt.population * opt.elite_fraction)))
    best_p, best_c = None, math.inf
    history: list[float] = []
    for gen in range(opt.generations):
        pop = np.clip(mean + std * rng.standard_normal((opt.population, mean.size)), lo, hi)
        if best_p is not None:
            pop[-1] = best_p
        costs = _evaluate(problem, template, pop, spec, t0, init, i0, train, Q, opt)
        order = np.lexsort((np.arange(len(costs)), costs))
        elite = pop[order[:n_elite]]
        if costs[order[0]] < best_c or best_p is None:
            best_c, best_p = float(costs[order[0]]), pop[order[0]].copy()
        history.append(best_c)
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), opt.min_std)
        if time.monotonic() - start > opt.budget_seconds:
            raise BudgetExceeded(f"optimisation exceeded {opt.budget_seconds} s after {gen + 1} generations")
    control = template.with_params(best_p)
    control = control.with_params(np.clip(control.flat(), lo, hi))
    if opt.eval_reps == 0:
        return OptimResult(control, math.nan, math.nan, history)
    test = replace(sim, mc_reps=opt.eval_reps, seed=sim.seed + 1_000_003)
    runner = simulate_nagent if problem == "nagent" else simulate_meanfield
    rec = runner(t0, init, i0, control, spec, test, Q=Q)
    mean_c, se = cost_estimate(rec)
    return OptimResult(control, mean_c, se, history)
