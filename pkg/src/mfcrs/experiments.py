"""
Experiment configuration, log-log rate fitting, and the value-convergence and
propagation-of-chaos runners with their CSV/JSON outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .control import FeedbackControl, OptimConfig, optimize_control
from .measure_metric import DiscreteMeasure, build_basis, make_weights
from .model import ModelSpec, make_model
from .regime_chain import validate_generator
from .simulate import SimConfig, coupled_poc_run, cost_estimate, mean_field_prerun, simulate_meanfield, simulate_nagent


class InsufficientSignal(RuntimeError):
    pass


class NonPositiveGap(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: dict
    Q: list
    rho0: dict = field(default_factory=lambda: {"atoms": [[0.0, 1.0]]})
    i0: int = 0
    t0: float = 0.0
    control: dict = field(default_factory=lambda: {"representation": "constant"})
    N_sweep: list = field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512])
    n_mf: int = 5120
    dt: float = 0.02
    mc_reps: int = 1000
    mf_reps: int = 64
    seed: int = 0
    out: str = "results"
    basis_degree: int = 6
    metric_b: float = 10.0
    optimizer: dict = field(default_factory=dict)
    mf_optimizer: dict = field(default_factory=dict)
    mf_opt_particles: int = 1024
    thinning: bool = False
    block_size: int = 256
    threads: int = 1
    hjb: dict = field(default_factory=dict)

    def __post_init__(self):
        sweep = list(self.N_sweep)
        if any(b <= a for a, b in zip(sweep, sweep[1:])):
            raise ConfigError("N_sweep must be strictly increasing")
        if sweep and (sweep[0] < 1 or sweep[-1] > self.n_mf):
            raise ConfigError("every N in the sweep must lie in [1, n_mf]")
        if "name" not in self.model:
            raise ConfigError("model needs a name")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_regimes(self) -> int:
        return len(self.Q)

    def spec(self, D: int | None = None) -> ModelSpec:
        return make_model(self.model["name"], self.model.get("params", {}), n_regimes=self.n_regimes, D=D or max(self.basis_degree, 6))

    def generator(self):
        return validate_generator(self.Q)

    def initial_law(self) -> DiscreteMeasure:
        return DiscreteMeasure.from_dict(self.rho0)

    def template(self, spec: ModelSpec) -> FeedbackControl:
        c = dict(self.control)
        kind = c.pop("representation", "constant")
        kw = {k: tuple(v) for k, v in c.items() if k in ("features", "time_breaks", "feature_breaks")}
        extra = set(c) - {"features", "time_breaks", "feature_breaks"}
        if extra:
            raise ConfigError(f"unknown control keys: {sorted(extra)}")
        return FeedbackControl.zeros(kind, spec.A, self.n_regimes, **kw)

    def sim(self, **kw) -> SimConfig:
        base = SimConfig(
            dt=self.dt, N=kw.pop("N", 1), n_mf=self.n_mf, mc_reps=self.mc_reps, seed=self.seed,
            thinning=self.thinning, block_size=self.block_size, threads=self.threads,
            record_degree=self.basis_degree,
        )
        return replace(base, **kw)

    def optim(self, meanfield: bool = False) -> OptimConfig:
        d = self.mf_optimizer if meanfield else self.optimizer
        try:
            return OptimConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"bad optimizer settings: {exc}") from None

    def hash(self) -> str:
        """Digest of every setting that can change the results."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("out", "threads")}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    """Read a config from a path, or by bare name from the shipped configs."""
    p = Path(path)
    if p.exists():
        text = p.read_text()
    else:
        name = p.name if p.suffix else p.name + ".json"
        try:
            text = resources.files("mfcrs.configs").joinpath(name).read_text()
        except (FileNotFoundError, ModuleNotFoundError):
            raise ConfigError(f"config {path!s} not found") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


def derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint32)[0])


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------


@dataclass
class RateFit:
    sizes: list[int]
    means: list[float]
    ses: list[float]
    slope: float
    intercept: float
    half_width: float
    residual_se: float = math.nan

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi


def fit_rate(sizes, means, ses, check_signal: bool = True) -> RateFit:
    """Least-squares slope of ``log mean`` against ``log N``.

    The half-width is ``1.96`` times the delta-method standard deviation of
    the slope from the per-size standard errors.
    """
    n = np.asarray(sizes, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(ses, dtype=np.float64)
    if n.size < 3:
        raise ValueError("need at least three sizes")
    if np.any(m <= 0):
        raise NonPositiveGap("all gap means must be positive")
    if check_signal and np.any(m <= 3 * s):
        bad = [int(k) for k, a, b in zip(n, m, s) if a <= 3 * b]
        raise InsufficientSignal(f"gap within 3 SE of zero at N = {bad}")
    x, y = np.log(n), np.log(m)
    xc = x - x.mean()
    w = xc / np.dot(xc, xc)
    slope = float(np.dot(w, y))
    intercept = float(y.mean() - slope * x.mean())
    half = 1.96 * math.sqrt(float(np.sum(w**2 * (s / m) ** 2)))
    resid = y - intercept - slope * x
    # scatter about the line, which the per-size errors alone do not capture
    res_se = math.sqrt(float(resid @ resid) / (n.size - 2) / float(xc @ xc)) if n.size > 2 else math.nan
    return RateFit(n.astype(int).tolist(), m.tolist(), s.tolist(), slope, intercept, half, res_se)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

CSV_HEADER = ("N", "statistic", "mean", "se", "reps", "seed")


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(rows, key=lambda r: (r[0], r[1])):
        w.writerow([int(r[0]), r[1], repr(float(r[2])), repr(float(r[3])), int(r[4]), int(r[5])])
    return buf.getvalue()


@dataclass
class FitSummary:
    experiment: str
    statistic: str
    target: float
    interval: tuple[float, float]
    slope: float | None
    half_width: float | None
    passed: bool
    config_hash: str
    seed: int
    error: str | None = None
    residual_se: float | None = None

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "statistic": self.statistic,
            "slope": self.slope,
            "half_width": self.half_width,
            "target": self.target,
            "interval": list(self.interval),
            "pass": self.passed,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "error": self.error,
            "residual_se": self.residual_se,
        }


@dataclass
class ExperimentResult:
    name: str
    rows: list
    fits: list[FitSummary]
    extra: dict = field(default_factory=dict)

    @property
    def csv(self) -> str:
        return rows_to_csv(self.rows)

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fits)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.name}.csv"
        json_path = out / f"{self.name}_summary.json"
        csv_path.write_text(self.csv)
        json_path.write_text(json.dumps([f.to_dict() for f in self.fits], indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _summarise(experiment, statistic, sizes, means, ses, target, interval, cfg: ExperimentConfig) -> FitSummary:
    try:
        fit = fit_rate(sizes, means, ses)
    except (InsufficientSignal, NonPositiveGap) as exc:
        return FitSummary(experiment, statistic, target, interval, None, None, False, cfg.hash(), cfg.seed, f"{type(exc).__name__}: {exc}")
    ok = interval[0] <= fit.slope <= interval[1]
    return FitSummary(experiment, statistic, target, interval, fit.slope, fit.half_width, ok, cfg.hash(), cfg.seed, residual_se=fit.residual_se)


# ---------------------------------------------------------------------------
# Controls used by the runners
# ---------------------------------------------------------------------------


def meanfield_control(cfg: ExperimentConfig, spec: ModelSpec, log=None) -> FeedbackControl:
    """Closed-form optimum when the model provides one, else CEM on the proxy."""
    rho0 = cfg.initial_law()
    if spec.optimal_control is not None:
        ctl = spec.optimal_control("meanfield", cfg.t0, rho0, cfg.i0)
        if ctl is not None and ctl.kind == cfg.template(spec).kind:
            return ctl
    sim = cfg.sim(N=min(cfg.mf_opt_particles, cfg.n_mf), n_mf=min(cfg.mf_opt_particles, cfg.n_mf), seed=derived_seed(cfg.seed, 11))
    res = optimize_control("meanfield", spec, cfg.t0, rho0, cfg.i0, cfg.template(spec), sim, cfg.optim(meanfield=True), Q=cfg.generator())
    if log:
        log(f"mean-field control {res.control.flat().tolist()} cost {res.cost:.6g}")
    return res.control


def nagent_control(cfg: ExperimentConfig, spec: ModelSpec, N: int, log=None):
    sim = cfg.sim(N=N, seed=derived_seed(cfg.seed, 13, N))
    # the callers re-estimate costs themselves, so skip the internal evaluation
    opt = replace(cfg.optim(), eval_reps=0)
    res = optimize_control("nagent", spec, cfg.t0, cfg.initial_law(), cfg.i0, cfg.template(spec), sim, opt, Q=cfg.generator())
    if log:
        log(f"N={N}: control {res.control.flat().tolist()} training cost {res.history[-1]:.6g}")
    return res


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------


def run_value_convergence(cfg: ExperimentConfig, log=None) -> ExperimentResult:
    """Gap between the optimised N-agent value and the mean-field value.

    For each ``N`` the N-agent problem is optimised within the configured
    control class and its value re-estimated on ``mc_reps`` fresh
    replications with initial states i.i.d. from ``rho0``.  The mean-field
    value uses the mean-field optimal control on ``n_mf`` particles.
    """
    if cfg.n_mf < 10 * max(cfg.N_sweep):
        raise ConfigError("n_mf must be at least 10 times the largest N")
    spec = cfg.spec()
    Q = cfg.generator()
    rho0 = cfg.initial_law()
    ctl_mf = meanfield_control(cfg, spec, log)
    mf = simulate_meanfield(cfg.t0, rho0, cfg.i0, ctl_mf, spec, cfg.sim(N=1, mc_reps=cfg.mf_reps, seed=derived_seed(cfg.seed, 17)), Q=Q)
    v_mean, v_se = cost_estimate(mf)
    if log:
        log(f"mean-field value {v_mean:.6g} +- {v_se:.2g}")
    rows = [(0, "meanfield_value", v_mean, v_se, cfg.mf_reps, cfg.seed)]
    means, ses = [], []
    for N in cfg.N_sweep:
        res = nagent_control(cfg, spec, N, log)
        sim = cfg.sim(N=N, seed=derived_seed(cfg.seed, 19, N))
        rec = simulate_nagent(cfg.t0, rho0, cfg.i0, res.control, spec, sim, Q=Q)
        u_mean, u_se = cost_estimate(rec)
        gap = abs(u_mean - v_mean)
        se = math.hypot(u_se, v_se)
        means.append(gap)
        ses.append(se)
        rows += [
            (N, "nagent_value", u_mean, u_se, cfg.mc_reps, cfg.seed),
            (N, "value_gap", gap, se, cfg.mc_reps, cfg.seed),
        ]
        if log:
            log(f"N={N}: value {u_mean:.6g} +- {u_se:.2g}, gap {gap:.4g} +- {se:.2g}")
    fit = _summarise("value_convergence", "value_gap", cfg.N_sweep, means, ses, -0.5, (-0.7, -0.3), cfg)
    return ExperimentResult("value_convergence", rows, [fit], {"meanfield_control": ctl_mf.to_dict()})


POC_TARGETS = {
    "metric_gap": (-0.25, (-0.45, -0.15)),
    "particle_gap": (-0.5, (-0.7, -0.3)),
    "control_gap": (-0.5, (-0.7, -0.3)),
}


def run_poc(cfg: ExperimentConfig, log=None, basis_degree: int | None = None) -> ExperimentResult:
    """Coupled runs of the optimised N-agent system against the mean-field optimum."""
    D = basis_degree or cfg.basis_degree
    spec = cfg.spec(D=max(D, 6))
    Q = cfg.generator()
    rho0 = cfg.initial_law()
    basis = build_basis(D, spec.jump.moments[:D])
    weights = make_weights(basis, cfg.metric_b, spec.delta)
    ctl_mf = meanfield_control(cfg, spec, log)
    rows = []
    stats = {k: ([], []) for k in POC_TARGETS}
    controls = {}
    # the pre-run depends on the seed and replication count only, not on N
    coupled_seed = derived_seed(cfg.seed, 23)
    mf = mean_field_prerun(cfg.t0, cfg.i0, ctl_mf, spec, cfg.sim(N=1, seed=coupled_seed), rho0, max(D, *spec.moment_index, *ctl_mf.features, *cfg.template(spec).features), Q=Q)
    for N in cfg.N_sweep:
        ctl_N = nagent_control(cfg, spec, N, log).control
        controls[N] = ctl_N.to_dict()
        sim = cfg.sim(N=N, seed=coupled_seed)
        rec = coupled_poc_run(cfg.t0, cfg.i0, ctl_N, ctl_mf, spec, sim, rho0, basis, weights, Q=Q, mf=mf)
        for name, arr in rec.statistics().items():
            mean = math.fsum(arr) / arr.size
            se = float(np.std(arr, ddof=1) / math.sqrt(arr.size))
            rows.append((N, name, mean, se, arr.size, cfg.seed))
            if name in stats:
                stats[name][0].append(mean)
                stats[name][1].append(se)
        if log:
            log(f"N={N}: " + ", ".join(f"{k} {stats[k][0][-1]:.4g}" for k in stats))
    fits = [_summarise("poc", name, cfg.N_sweep, *stats[name], *POC_TARGETS[name], cfg) for name in POC_TARGETS]
    return ExperimentResult("poc", rows, fits, {"meanfield_control": ctl_mf.to_dict(), "nagent_controls": controls})
