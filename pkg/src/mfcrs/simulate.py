"""
Euler time-stepping of the N-agent system and of the conditional mean-field
flow (large particle proxy sharing one regime path), cost functionals and
coupled runs for propagation-of-chaos experiments.

All particles of one replication read the same regime path.  Random streams
are keyed by ``(seed, tag, block)`` where a block is a fixed-size group of
replications, so output does not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .measure_metric import DiscreteMeasure, PolynomialBasis, WeightSequence, metric_from_moments
from .model import ModelSpec
from .regime_chain import GeneratorMatrix, sample_path, validate_generator

TAG_REGIME = 1
TAG_INIT = 2
TAG_NOISE = 3
TAG_MF = 4
TAG_MF_INIT = 5


class NonFiniteState(RuntimeError):
    pass


class InsufficientReplications(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Numerical parameters shared by all simulation entry points."""

    dt: float = 0.01
    N: int = 64
    n_mf: int = 1024
    mc_reps: int = 256
    seed: int = 0
    thinning: bool = False
    block_size: int = 64
    threads: int = 1
    record_degree: int = 6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.N < 1 or self.n_mf < self.N:
            raise ValueError("need 1 <= N <= n_mf")
        if self.mc_reps < 1 or self.block_size < 1 or self.threads < 1:
            raise ValueError("mc_reps, block_size and threads must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class ParticleEnsemble:
    """Positions of ``N`` particles at time ``t`` with their running costs."""

    positions: NDArray[np.float64]
    t: float
    path: object
    running_cost: NDArray[np.float64] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).copy()
        if self.positions.ndim != 1 or self.positions.size < 1:
            raise ValueError("need at least one particle")
        if not np.all(np.isfinite(self.positions)):
            raise NonFiniteState("non-finite particle position")
        if self.running_cost is None:
            self.running_cost = np.zeros_like(self.positions)

    @property
    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure.empirical(self.positions)


@dataclass
class TrajectoryRecord:
    """Per-replication summaries on the simulation grid.

    ``moments[r, k, j]`` is ``<mu, x^(j+1)>`` at ``times[k]``; ``regimes`` holds
    the right-continuous state on the grid (the last column is ``alpha_T``).
    """

    times: NDArray[np.float64]
    moments: NDArray[np.float64]
    regimes: NDArray[np.int64]
    running_cost: NDArray[np.float64]
    cost: NDArray[np.float64]
    terminal: NDArray[np.float64] | None = None
    controls: NDArray[np.float64] | None = None
    n_particles: int = 0

    @property
    def reps(self) -> int:
        return len(self.cost)

    def to_csv(self, path, rep: int | None = None) -> None:
        """Columns ``rep, t, regime, moment_1..moment_D, running_cost``."""
        D = self.moments.shape[2]
        rows = range(self.reps) if rep is None else [rep]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rep", "t", "regime", *[f"moment_{k}" for k in range(1, D + 1)], "running_cost"])
            for r in rows:
                for k, t in enumerate(self.times):
                    w.writerow([r, repr(float(t)), int(self.regimes[r, k]), *[repr(float(m)) for m in self.moments[r, k]], repr(float(self.running_cost[r, k]))])


def time_grid(t0: float, T: float, dt: float) -> NDArray[np.float64]:
    if not t0 < T:
        raise ValueError("need t0 < T")
    if dt > T - t0 + 1e-12:
        raise ValueError("dt must not exceed the horizon")
    n = max(1, int(math.ceil((T - t0) / dt - 1e-9)))
    return np.linspace(t0, T, n + 1)


def stream(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), int(index)]))


def regime_path_for(Q: GeneratorMatrix, i0: int, t0: float, T: float, seed: int, rep: int):
    """Regime path of replication ``rep``; shared by every run with the same seed."""
    return sample_path(Q, i0, t0, T, seed=stream(seed, TAG_REGIME, rep))


def power_moments(x: NDArray[np.float64], D: int, weights=None) -> NDArray[np.float64]:
    """``(<mu, x^k>)_{k=1..D}`` per row of ``x``."""
    out = np.empty((x.shape[0], D))
    p = np.ones_like(x)
    for k in range(D):
        p = p * x
        out[:, k] = p.mean(axis=1) if weights is None else np.sum(p * weights, axis=1)
    return out


class _Noise:
    """Per-step Brownian increments, jump uniforms and marks for a block."""

    def __init__(self, rng: np.random.Generator, shape, thinning: bool, rate_bound: float, dt: float):
        self.z = rng.standard_normal(shape)
        if thinning:
            self.count = rng.poisson(rate_bound * dt, size=shape)
            kmax = int(self.count.max()) if self.count.size else 0
            self.accept = rng.random((kmax, *shape))
            self.marks = rng.random((kmax, *shape))
        else:
            self.count = None
            self.accept = rng.random(shape)
            self.marks = rng.random(shape)

    def tiled(self, reps: int) -> "_Noise":
        if reps == 1:
            return self
        out = object.__new__(_Noise)
        out.z = np.tile(self.z, (reps, 1))
        out.count = None if self.count is None else np.tile(self.count, (reps, 1))
        if self.count is None:
            out.accept = np.tile(self.accept, (reps, 1))
            out.marks = np.tile(self.marks, (reps, 1))
        else:
            out.accept = np.tile(self.accept, (1, reps, 1))
            out.marks = np.tile(self.marks, (1, reps, 1))
        return out


def _jumps(spec: ModelSpec, lam, noise: _Noise, dt: float, thinning: bool):
    if not thinning:
        hit = noise.accept < -np.expm1(-lam * dt)
        return np.where(hit, spec.jump.quantile_sample(noise.marks), 0.0)
    total = np.zeros_like(noise.z)
    ratio = lam / spec.C0
    for k in range(noise.accept.shape[0]):
        hit = (k < noise.count) & (noise.accept[k] < ratio)
        total += np.where(hit, spec.jump.quantile_sample(noise.marks[k]), 0.0)
    return total


def _coef(fn, shape, *args):
    return np.broadcast_to(fn(*args), shape)


def _advance(spec, x, feats, v, i, t, dt, noise, thinning):
    """One Euler step; returns new positions and per-particle running cost."""
    m = feats[:, [k - 1 for k in spec.moment_index]]
    b = _coef(spec.b, x.shape, t, x, m, v, i)
    sig = _coef(spec.sigma, x.shape, t, x, m, v, i)
    lam = _coef(spec.lam, x.shape, t, x, m, v, i)
    f = _coef(spec.f, x.shape, t, x, m, v, i)
    new = x + b * dt + sig * math.sqrt(dt) * noise.z + _jumps(spec, lam, noise, dt, thinning)
    return new, f * dt


@dataclass
class _Run:
    """Everything a block worker needs."""

    spec: ModelSpec
    Q: GeneratorMatrix
    t0: float
    i0: int
    grid: NDArray[np.float64]
    n_particles: int
    init: object
    control: object
    config: SimConfig
    noise_tag: int
    init_tag: int
    degree: int
    params: NDArray[np.float64] | None = None
    frozen: NDArray[np.float64] | None = None
    observer: Callable | None = None
    keep_terminal: bool = False
    keep_controls: bool = False


def _initial_positions(init, rng, shape, reps: range | None = None) -> NDArray[np.float64]:
    if isinstance(init, np.ndarray) and init.ndim == 2:
        # one starting cloud per replication
        return np.array(init[reps.start : reps.stop], dtype=np.float64)
    if isinstance(init, DiscreteMeasure):
        return init.sample(rng, shape)
    if callable(init):
        return np.asarray(init(rng, shape), dtype=np.float64)
    x0 = np.asarray(init, dtype=np.float64)
    return np.broadcast_to(x0, shape).copy()


def _needed_degree(run: _Run) -> int:
    d = max(max(run.spec.moment_index), run.degree, 1)
    feats = getattr(run.control, "features", ())
    if feats:
        d = max(d, max(feats))
    return d


def _simulate_block(run: _Run, block: int, reps: range):
    cfg, spec, grid = run.config, run.spec, run.grid
    B = len(reps)
    n_cand = 1 if run.params is None else run.params.shape[0]
    R = n_cand * B
    N = run.n_particles
    D = _needed_degree(run)
    n = len(grid) - 1

    paths = [regime_path_for(run.Q, run.i0, run.t0, float(grid[-1]), cfg.seed, r) for r in reps]
    left = np.stack([p.left_states(grid) for p in paths])
    right = np.stack([p.right_states(grid) for p in paths])
    left = np.tile(left, (n_cand, 1))
    right = np.tile(right, (n_cand, 1))

    x = _initial_positions(run.init, stream(cfg.seed, run.init_tag, block), (B, N), reps)
    x = np.tile(x, (n_cand, 1))
    rows_params = None if run.params is None else np.repeat(run.params, B, axis=0)
    rng = stream(cfg.seed, run.noise_tag, block)

    moments = np.empty((R, n + 1, run.degree))
    running = np.zeros((R, n + 1))
    controls = np.empty((R, n, spec.A.dim)) if run.keep_controls else None
    frozen = None if run.frozen is None else np.tile(run.frozen[reps.start : reps.stop], (n_cand, 1, 1))
    row_ids = slice(reps.start, reps.stop)
    acc = np.zeros(R)
    for k in range(n + 1):
        t = float(grid[k])
        feats = power_moments(x, D) if frozen is None else frozen[:, k, :D]
        emp = feats if frozen is None else power_moments(x, D)
        moments[:, k] = emp[:, : run.degree]
        running[:, k] = acc
        if run.observer is not None:
            run.observer(k, t, x, right[:, k], row_ids)
        if k == n:
            break
        dt = float(grid[k + 1] - grid[k])
        i = left[:, k]
        v = run.control.evaluate_rows(t, feats, i, rows_params)
        if controls is not None:
            controls[:, k] = v
        noise = _Noise(rng, (B, N), cfg.thinning, spec.C0, dt).tiled(n_cand)
        x, fdt = _advance(spec, x, feats, v, i, t, dt, noise, cfg.thinning)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"non-finite state at t={grid[k + 1]:.6g} in block {block}")
        acc = acc + fdt.mean(axis=1)
    T = float(grid[-1])
    featsT = power_moments(x, D) if frozen is None else frozen[:, n, :D]
    mT = featsT[:, [k - 1 for k in spec.moment_index]]
    h = np.broadcast_to(spec.h(T, x, mT, right[:, n]), x.shape)
    cost = acc + h.mean(axis=1)
    return {
        "moments": moments,
        "running": running,
        "regimes": right,
        "cost": cost,
        "terminal": x if run.keep_terminal else None,
        "controls": controls,
        "n_cand": n_cand,
    }


def _blocks(reps: int, size: int) -> list[tuple[int, range]]:
    return [(b, range(s, min(s + size, reps))) for b, s in enumerate(range(0, reps, size))]


def _execute(run: _Run, reps: int) -> TrajectoryRecord | list[TrajectoryRecord]:
    blocks = _blocks(reps, run.config.block_size)
    if run.config.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=run.config.threads) as pool:
            parts = list(pool.map(lambda bl: _simulate_block(run, *bl), blocks))
    else:
        parts = [_simulate_block(run, *bl) for bl in blocks]
    n_cand = parts[0]["n_cand"]

    def gather(key, c):
        chunks = []
        for part, (_, rg) in zip(parts, blocks):
            arr = part[key]
            if arr is None:
                return None
            B = len(rg)
            chunks.append(arr[c * B : (c + 1) * B])
        return np.concatenate(chunks, axis=0)

    records = [
        TrajectoryRecord(
            times=run.grid.copy(),
            moments=gather("moments", c),
            regimes=gather("regimes", c),
            running_cost=gather("running", c),
            cost=gather("cost", c),
            terminal=gather("terminal", c),
            controls=gather("controls", c),
            n_particles=run.n_particles,
        )
        for c in range(n_cand)
    ]
    return records if run.params is not None else records[0]


def _as_generator(Q) -> GeneratorMatrix:
    return Q if isinstance(Q, GeneratorMatrix) else validate_generator(Q)


def _check_start(spec: ModelSpec, Q: GeneratorMatrix, i0: int, t0: float):
    if Q.s0 != spec.n_regimes:
        raise ValueError(f"generator has {Q.s0} states but model expects {spec.n_regimes}")
    if not 0 <= i0 < Q.s0:
        raise ValueError(f"initial regime {i0} outside 0..{Q.s0 - 1}")
    if not t0 < spec.T:
        raise ValueError("need t0 < T")


def simulate_nagent(
    t0: float,
    x0,
    i0: int,
    control,
    spec: ModelSpec,
    config: SimConfig,
    Q=((0.0,),),
    params: NDArray[np.float64] | None = None,
    observer: Callable | None = None,
    keep_terminal: bool = False,
    keep_controls: bool = False,
):
    """Simulate ``config.mc_reps`` replications of the N-agent system.

    ``x0`` is either a fixed configuration of length ``N`` or an initial law
    (``DiscreteMeasure`` or sampler ``(rng, shape) -> array``) from which each
    replication draws ``config.N`` i.i.d. states.  With ``params`` of shape
    ``(C, P)`` the run is batched over ``C`` candidate parameter vectors of
    ``control`` that share all random numbers; a list of records is returned.
    """
    Q = _as_generator(Q)
    _check_start(spec, Q, i0, t0)
    if isinstance(x0, (DiscreteMeasure,)) or callable(x0):
        n_particles = config.N
    else:
        x0 = np.asarray(x0, dtype=np.float64).ravel()
        if x0.size != config.N:
            raise ValueError(f"x0 has {x0.size} entries, config.N = {config.N}")
        n_particles = x0.size
    run = _Run(
        spec, Q, t0, i0, time_grid(t0, spec.T, config.dt), n_particles, x0, control, config,
        TAG_NOISE, TAG_INIT, config.record_degree, params=params, observer=observer,
        keep_terminal=keep_terminal, keep_controls=keep_controls,
    )
    return _execute(run, config.mc_reps)


def simulate_meanfield(
    t0: float,
    rho0,
    i0: int,
    control,
    spec: ModelSpec,
    config: SimConfig,
    Q=((0.0,),),
    params: NDArray[np.float64] | None = None,
    observer: Callable | None = None,
    keep_controls: bool = False,
    keep_terminal: bool = False,
):
    """Mean-field flow proxied by ``config.n_mf`` particles per regime path.

    ``rho0`` is an initial law, or an array of shape ``(mc_reps, n)`` giving
    one starting cloud per replication.
    """
    Q = _as_generator(Q)
    _check_start(spec, Q, i0, t0)
    n_particles = config.n_mf
    if isinstance(rho0, np.ndarray) and rho0.ndim == 2:
        if rho0.shape[0] < config.mc_reps:
            raise ValueError("need one starting cloud per replication")
        n_particles = rho0.shape[1]
    run = _Run(
        spec, Q, t0, i0, time_grid(t0, spec.T, config.dt), n_particles, rho0, control, config,
        TAG_MF, TAG_MF_INIT, config.record_degree, params=params, observer=observer,
        keep_controls=keep_controls, keep_terminal=keep_terminal,
    )
    return _execute(run, config.mc_reps)


def step(ensemble: ParticleEnsemble, control, spec: ModelSpec, dt: float, rng: np.random.Generator, thinning: bool = False) -> ParticleEnsemble:
    """Advance one ensemble by ``dt`` using the regime left limit at ``t``."""
    t = ensemble.t
    if t + dt > spec.T + 1e-12:
        raise ValueError("step would pass the horizon")
    x = ensemble.positions[None, :]
    D = max(max(spec.moment_index), max(getattr(control, "features", (1,)) or (1,)))
    feats = power_moments(x, D)
    i = np.array([ensemble.path.state_at(t)[0]])
    v = control.evaluate_rows(t, feats, i, None)
    noise = _Noise(rng, x.shape, thinning, spec.C0, dt)
    new, fdt = _advance(spec, x, feats, v, i, t, dt, noise, thinning)
    if not np.all(np.isfinite(new)):
        raise NonFiniteState(f"non-finite state at t={t + dt:.6g}")
    return ParticleEnsemble(new[0], t + dt, ensemble.path, ensemble.running_cost + fdt[0])


def cost_estimate(records) -> tuple[float, float]:
    """Mean and standard error of the per-replication cost."""
    if isinstance(records, TrajectoryRecord):
        costs = records.cost
    else:
        costs = np.concatenate([np.atleast_1d(r.cost) for r in records])
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size < 2:
        raise InsufficientReplications("need at least two replications")
    mean = math.fsum(costs) / costs.size
    se = float(np.std(costs, ddof=1) / math.sqrt(costs.size))
    return mean, se


@dataclass
class CoupledRecord:
    """Per-replication gap statistics of a coupled run."""

    metric_gap: NDArray[np.float64]
    particle_gap_y: NDArray[np.float64]
    particle_gap_iid: NDArray[np.float64]
    control_gap: NDArray[np.float64]
    N: int
    extra: dict = field(default_factory=dict)

    def statistics(self) -> dict[str, NDArray[np.float64]]:
        return {
            "metric_gap": self.metric_gap,
            "particle_gap": self.particle_gap_iid,
            "particle_gap_y": self.particle_gap_y,
            "control_gap": self.control_gap,
        }


def coupled_poc_run(
    t0: float,
    i0: int,
    control_N,
    control_mf,
    spec: ModelSpec,
    config: SimConfig,
    rho0,
    basis: PolynomialBasis,
    weights: WeightSequence,
    Q=((0.0,),),
    mf: TrajectoryRecord | None = None,
) -> CoupledRecord:
    """Three N-particle systems driven by identical noise.

    ``X*`` runs ``control_N`` with its own empirical measure, ``Y`` runs
    ``control_mf`` with its own empirical measure, and ``X~`` runs
    ``control_mf`` with coefficients fed the mean-field moment flow of a
    pre-run sharing the regime path.  A pre-run from :func:`mean_field_prerun`
    with the same config may be passed as ``mf`` to avoid recomputing it.
    """
    Q = _as_generator(Q)
    _check_start(spec, Q, i0, t0)
    grid = time_grid(t0, spec.T, config.dt)
    D = max(basis.max_degree, max(spec.moment_index), *(max(getattr(c, "features", (1,)) or (1,)) for c in (control_N, control_mf)))
    if mf is None:
        mf = mean_field_prerun(t0, i0, control_mf, spec, config, rho0, D, Q=Q)
    if mf.moments.shape[2] < D or mf.reps < config.mc_reps:
        raise ValueError("mean-field pre-run too small for this coupled run")
    blocks = _blocks(config.mc_reps, config.block_size)

    def work(block, reps):
        return _coupled_block(spec, Q, t0, i0, grid, control_N, control_mf, config, rho0, mf, D, basis, weights, block, reps)

    if config.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(lambda bl: work(*bl), blocks))
    else:
        parts = [work(*bl) for bl in blocks]
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return CoupledRecord(cat["metric"], cat["gap_y"], cat["gap_iid"], cat["ctrl"], config.N, {"mf_cost": mf.cost})


def mean_field_prerun(t0, i0, control_mf, spec, config: SimConfig, rho0, degree: int, Q=((0.0,),)) -> TrajectoryRecord:
    """Mean-field moment flow and controls consumed by :func:`coupled_poc_run`."""
    cfg = replace(config, record_degree=degree)
    return simulate_meanfield(t0, rho0, i0, control_mf, spec, cfg, Q=_as_generator(Q), keep_controls=True)


def _coupled_block(spec, Q, t0, i0, grid, control_N, control_mf, cfg, rho0, mf, D, basis, weights, block, reps):
    B, N, n = len(reps), cfg.N, len(grid) - 1
    paths = [regime_path_for(Q, i0, t0, float(grid[-1]), cfg.seed, r) for r in reps]
    left = np.stack([p.left_states(grid) for p in paths])
    frozen = mf.moments[reps.start : reps.stop]
    x = _initial_positions(rho0, stream(cfg.seed, TAG_INIT, block), (B, N), reps)
    xs, ys, xt = x.copy(), x.copy(), x.copy()
    rng = stream(cfg.seed, TAG_NOISE, block)
    sup_y = np.zeros((B, N))
    sup_iid = np.zeros((B, N))
    metric = np.zeros(B)
    ctrl = np.zeros(B)
    ones = np.ones((B, 1))
    for k in range(n + 1):
        fx = power_moments(xs, D)
        fy = power_moments(ys, D)
        fz = frozen[:, k, :D]
        mom_x = np.concatenate([ones, fx[:, : basis.max_degree]], axis=1)
        mom_mf = np.concatenate([ones, fz[:, : basis.max_degree]], axis=1)
        metric = np.maximum(metric, metric_from_moments(mom_x, mom_mf, basis, weights))
        np.maximum(sup_y, (xs - ys) ** 2, out=sup_y)
        np.maximum(sup_iid, (xs - xt) ** 2, out=sup_iid)
        if k == n:
            break
        t = float(grid[k])
        dt = float(grid[k + 1] - grid[k])
        i = left[:, k]
        vx = control_N.evaluate_rows(t, fx, i, None)
        vy = control_mf.evaluate_rows(t, fy, i, None)
        vt = mf.controls[reps.start : reps.stop, k]
        ctrl += np.sum((vx - vt) ** 2, axis=1) * dt
        noise = _Noise(rng, (B, N), cfg.thinning, spec.C0, dt)
        xs, _ = _advance(spec, xs, fx, vx, i, t, dt, noise, cfg.thinning)
        ys, _ = _advance(spec, ys, fy, vy, i, t, dt, noise, cfg.thinning)
        xt, _ = _advance(spec, xt, fz, vt, i, t, dt, noise, cfg.thinning)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)) and np.all(np.isfinite(xt))):
            raise NonFiniteState(f"non-finite state in coupled block {block}")
    return {"metric": metric, "gap_y": sup_y.mean(axis=1), "gap_iid": sup_iid.mean(axis=1), "ctrl": ctrl}
