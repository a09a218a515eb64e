"""
Model specification: coefficients, costs, jump law and control box.

Coefficient callables are vectorised over replications.  With ``R``
replications of ``N`` particles they are called as ``b(t, x, m, v, i)`` with

* ``x`` of shape ``(R, N)`` (particle positions),
* ``m`` of shape ``(R, K)`` (moment features ``<mu, x^k>`` for ``k`` in
  ``moment_index``, in that order),
* ``v`` of shape ``(R, d_a)`` (control values),
* ``i`` of shape ``(R,)`` (0-based regimes),

and return something broadcastable to ``(R, N)``.  The terminal cost is
``h(t, x, m, i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .measure_metric import DiscreteMeasure

Coefficient = Callable[..., NDArray[np.float64]]


class UnsupportedFamily(ValueError):
    pass


@dataclass(frozen=True)
class JumpLaw:
    """Jump-size distribution with closed-form moments.

    ``moments[k-1]`` is ``m_k = (1/k!) int y^k gamma(dy)``.
    """

    kind: str
    params: dict
    delta: float
    exp_moment: float
    moments: tuple[float, ...]
    atoms: NDArray[np.float64] | None = None
    atom_weights: NDArray[np.float64] | None = None

    @property
    def is_discrete(self) -> bool:
        return self.atoms is not None

    def raw_moment(self, k: int) -> float:
        """``int y^k gamma(dy)``."""
        return _raw_moment(self.kind, self.params, k)

    def sample(self, rng: np.random.Generator, size) -> NDArray[np.float64]:
        if self.kind == "point_mass":
            return np.full(size, float(self.params["a"]))
        if self.kind == "finite_discrete":
            return rng.choice(self.atoms, size=size, p=self.atom_weights)
        return rng.uniform(float(self.params["a"]), float(self.params["b"]), size=size)

    def quantile_sample(self, u: NDArray[np.float64]) -> NDArray[np.float64]:
        """Marks from uniforms, so coupled systems can share them."""
        if self.kind == "point_mass":
            return np.full(np.shape(u), float(self.params["a"]))
        if self.kind == "finite_discrete":
            cdf = np.cumsum(self.atom_weights)
            idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
            return self.atoms[idx]
        a, b = float(self.params["a"]), float(self.params["b"])
        return a + (b - a) * u

    def quadrature(self, n: int = 16) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Nodes and weights integrating polynomials of degree < 2n exactly."""
        if self.kind == "point_mass":
            return np.array([float(self.params["a"])]), np.array([1.0])
        if self.kind == "finite_discrete":
            return self.atoms, self.atom_weights
        a, b = float(self.params["a"]), float(self.params["b"])
        z, w = np.polynomial.legendre.leggauss(n)
        return 0.5 * (b - a) * z + 0.5 * (a + b), 0.5 * w

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


def _raw_moment(kind: str, params: dict, k: int) -> float:
    if kind == "point_mass":
        return float(params["a"]) ** k
    if kind == "finite_discrete":
        return float(sum(w * y**k for y, w in params["atoms"]))
    a, b = float(params["a"]), float(params["b"])
    return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))


def _uniform_exp_moment(a: float, b: float, delta: float) -> float:
    # int_a^b e^{delta|x|} dx / (b - a), split at the origin
    def F(x):  # antiderivative of e^{delta|x|}
        return math.copysign((math.exp(delta * abs(x)) - 1.0) / delta, x)

    return (F(b) - F(a)) / (b - a)


def jump_law(kind: str, params: dict | None = None, delta: float = 1.0, D: int = 6) -> JumpLaw:
    params = dict(params or {})
    if kind == "point_mass":
        a = float(params.setdefault("a", 0.0))
        expm = math.exp(delta * abs(a))
        atoms, weights = np.array([a]), np.array([1.0])
    elif kind == "finite_discrete":
        raw = np.asarray(params["atoms"], dtype=np.float64).reshape(-1, 2)
        if np.any(raw[:, 1] <= 0) or abs(raw[:, 1].sum() - 1.0) > 1e-12:
            raise ValueError("finite_discrete weights must be positive and sum to 1")
        params["atoms"] = raw.tolist()
        atoms, weights = raw[:, 0].copy(), raw[:, 1].copy()
        expm = float(np.dot(weights, np.exp(delta * np.abs(atoms))))
    elif kind == "uniform":
        a, b = float(params["a"]), float(params["b"])
        if not a < b:
            raise ValueError("uniform needs a < b")
        expm = _uniform_exp_moment(a, b, delta)
        atoms = weights = None
    else:
        raise UnsupportedFamily(f"unsupported jump family {kind!r}")
    moments = tuple(_raw_moment(kind, params, k) / math.factorial(k) for k in range(1, D + 1))
    return JumpLaw(kind, params, float(delta), expm, moments, atoms, weights)


@dataclass(frozen=True)
class ControlBox:
    """Compact box ``A = prod [low_k, high_k]``."""

    low: tuple[float, ...]
    high: tuple[float, ...]

    @classmethod
    def interval(cls, lo: float, hi: float) -> "ControlBox":
        return cls((float(lo),), (float(hi),))

    @property
    def dim(self) -> int:
        return len(self.low)

    def clamp(self, v):
        return np.clip(v, np.asarray(self.low), np.asarray(self.high))

    def sample(self, rng: np.random.Generator, n: int) -> NDArray[np.float64]:
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    def grid(self, resolution: int) -> NDArray[np.float64]:
        axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(self.low, self.high)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


@dataclass(frozen=True)
class ModelSpec:
    b: Coefficient
    sigma: Coefficient
    lam: Coefficient
    f: Coefficient
    h: Coefficient
    A: ControlBox
    jump: JumpLaw
    T: float
    n_regimes: int = 1
    moment_index: tuple[int, ...] = (1,)
    C0: float = 1.0
    kappa0: float = 1.0
    kappa1: float = 1.0
    delta: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # closed-form pre-Hamiltonian maximiser for models concave-quadratic in v:
    # (t, mu, i0, dm_poly) -> v
    hamiltonian_argmax: Callable | None = None
    # builder (problem, t0, rho0, i0) -> FeedbackControl for a known optimum
    optimal_control: Callable | None = None

    @property
    def concave_quadratic(self) -> bool:
        return self.hamiltonian_argmax is not None

    def features(self, x: NDArray[np.float64], weights: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
        """Moment features ``(<mu, x^k>)_{k in I}`` per row of ``x``."""
        x = np.atleast_2d(x)
        if weights is None:
            return np.stack([np.mean(x**k, axis=1) for k in self.moment_index], axis=1)
        w = np.atleast_2d(weights)
        return np.stack([np.sum(w * x**k, axis=1) for k in self.moment_index], axis=1)

    def measure_features(self, mu: DiscreteMeasure) -> NDArray[np.float64]:
        return self.features(mu.positions[None, :], mu.weights[None, :])


def _regime_table(values, n_regimes: int) -> NDArray[np.float64]:
    arr = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if arr.size == 1:
        arr = np.full(n_regimes, arr[0])
    if arr.size != n_regimes:
        raise ValueError(f"need {n_regimes} per-regime values, got {arr.size}")
    return arr


def _col(a):
    return np.asarray(a)[:, None]


@dataclass
class ValidationReport:
    max_abs: dict[str, float]
    lipschitz: dict[str, float]
    bound_violations: list[str]
    lipschitz_violations: list[str]
    n_samples: int

    @property
    def ok(self) -> bool:
        return not self.bound_violations and not self.lipschitz_violations

    def to_dict(self) -> dict:
        return {
            "max_abs": self.max_abs,
            "lipschitz": self.lipschitz,
            "bound_violations": self.bound_violations,
            "lipschitz_violations": self.lipschitz_violations,
            "n_samples": self.n_samples,
            "ok": self.ok,
        }


def _random_measures(rng, n, n_atoms, x_range):
    pos = rng.uniform(-x_range, x_range, size=(n, n_atoms))
    w = rng.uniform(0.1, 1.0, size=(n, n_atoms))
    return pos, w / w.sum(axis=1, keepdims=True)


def validate_assumptions(spec: ModelSpec, n_samples: int = 2000, seed=0, x_range: float = 10.0) -> ValidationReport:
    """Statistical check of boundedness and Lipschitz continuity.

    Coefficients and costs are sampled at random points; Lipschitz ratios use
    point pairs perturbed in time only, space only, measure only, or all
    three.  Never a proof.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    n = n_samples
    t = rng.uniform(0.0, spec.T, size=n)
    x = rng.uniform(-x_range, x_range, size=n)
    pos, w = _random_measures(rng, n, 4, 2.0)
    v = spec.A.sample(rng, n)
    i = rng.integers(0, spec.n_regimes, size=n)

    def feats(pos, w):
        return spec.features(pos, w)

    def evaluate(name, t, x, pos, w):
        m = feats(pos, w)
        out = np.empty(n)
        # time enters as a scalar, so evaluate point by point in t-groups
        for k in range(n):
            args = (t[k], x[k : k + 1, None], m[k : k + 1], v[k : k + 1], i[k : k + 1])
            if name == "h":
                args = (t[k], x[k : k + 1, None], m[k : k + 1], i[k : k + 1])
            val = getattr(spec, name)(*args)
            out[k] = float(np.broadcast_to(val, (1, 1))[0, 0])
        return out

    names = ["b", "sigma", "lam", "f", "h"]
    base = {nm: evaluate(nm, t, x, pos, w) for nm in names}
    far = np.full(n, 1e6) * np.sign(x + 1e-300)
    far_vals = {nm: evaluate(nm, t, far, pos, w) for nm in names}

    max_abs = {nm: float(max(np.max(np.abs(base[nm])), np.max(np.abs(far_vals[nm])))) for nm in names}
    bound_violations = []
    for nm in ("b", "sigma", "lam"):
        if max_abs[nm] > spec.C0 * (1 + 1e-12):
            bound_violations.append(f"{nm} exceeds C0")
    for nm in names:
        if not np.all(np.isfinite(base[nm])) or not np.all(np.isfinite(far_vals[nm])):
            bound_violations.append(f"{nm} not finite")
        elif np.max(np.abs(far_vals[nm])) > 10 * max(np.max(np.abs(base[nm])), 1e-12):
            bound_violations.append(f"{nm} grows without bound")
    if np.any(base["lam"] < 0) or np.any(base["sigma"] < 0):
        bound_violations.append("negative sigma or lambda")

    eps = 1e-3
    t2, x2, pos2, w2 = t.copy(), x.copy(), pos.copy(), w.copy()
    kind = np.arange(n) % 4
    dt = rng.uniform(-eps, eps, n)
    dx = rng.uniform(-eps, eps, n)
    dpos = rng.uniform(-eps, eps, pos.shape)
    sel_t = (kind == 0) | (kind == 3)
    sel_x = (kind == 1) | (kind == 3)
    sel_m = (kind == 2) | (kind == 3)
    t2[sel_t] = np.clip(t[sel_t] + dt[sel_t], 0.0, spec.T)
    x2[sel_x] = x[sel_x] + dx[sel_x]
    pos2[sel_m] = pos[sel_m] + dpos[sel_m]
    denom = np.abs(t2 - t) + np.abs(x2 - x) + np.sum(np.abs(feats(pos2, w2) - feats(pos, w)), axis=1)
    ok = denom > 0
    lips = {}
    for nm in names:
        other = evaluate(nm, t2, x2, pos2, w2)
        r = np.abs(other - base[nm])[ok] / denom[ok]
        lips[nm] = float(r.max()) if r.size else 0.0
    lipschitz_violations = []
    for nm, kappa in (("b", spec.kappa0), ("sigma", spec.kappa0), ("lam", spec.kappa0), ("f", spec.kappa1), ("h", spec.kappa1)):
        if lips[nm] > kappa * (1 + 1e-6):
            lipschitz_violations.append(f"{nm} Lipschitz ratio {lips[nm]:.4g} exceeds {'kappa0' if kappa is spec.kappa0 else 'kappa1'}")
    return ValidationReport(max_abs, lips, bound_violations, lipschitz_violations, n)


# ---------------------------------------------------------------------------
# Built-in model library
# ---------------------------------------------------------------------------


def _jump_from_params(p: dict, delta: float, D: int) -> JumpLaw:
    spec = dict(p.get("jump", {"kind": "point_mass", "a": 0.0}))
    kind = spec.pop("kind")
    return jump_law(kind, spec, delta=delta, D=D)


def constant_model(params: dict | None = None, n_regimes: int = 1, D: int = 6) -> ModelSpec:
    """Model with constant (possibly per-regime) data.

    Control-free unless ``control_gain`` is set, in which case the drift is
    ``b_i + control_gain * v``.
    """
    p = dict(params or {})
    delta = float(p.get("delta", 1.0))
    b_tab = _regime_table(p.get("b", 0.0), n_regimes)
    s_tab = _regime_table(p.get("sigma", 0.0), n_regimes)
    l_tab = _regime_table(p.get("lam", 0.0), n_regimes)
    f_tab = _regime_table(p.get("f", 0.0), n_regimes)
    h_tab = _regime_table(p.get("h", 0.0), n_regimes)
    h_lin = float(p.get("h_linear", 0.0))
    gain = float(p.get("control_gain", 0.0))
    A = ControlBox.interval(*p.get("A", (-1.0, 1.0)))
    vmax = float(np.max(np.abs(np.concatenate([A.low, A.high]))))
    bound = float(np.max(np.abs(b_tab)) + abs(gain) * vmax + np.max(s_tab) + np.max(l_tab))
    return ModelSpec(
        b=lambda t, x, m, v, i: _col(b_tab[i]) + gain * v[:, :1],
        sigma=lambda t, x, m, v, i: _col(s_tab[i]),
        lam=lambda t, x, m, v, i: _col(l_tab[i]),
        f=lambda t, x, m, v, i: _col(f_tab[i]),
        h=lambda t, x, m, i: _col(h_tab[i]) + h_lin * x,
        A=A,
        jump=_jump_from_params(p, delta, D),
        T=float(p.get("T", 1.0)),
        n_regimes=n_regimes,
        moment_index=(1,),
        C0=float(p.get("C0", max(bound, 1e-12))),
        kappa0=float(p.get("kappa0", 1.0)),
        kappa1=float(p.get("kappa1", 1.0)),
        delta=delta,
        name="constant",
        params=p,
    )


def linear_mean_reverting(params: dict | None = None, n_regimes: int = 1, D: int = 6) -> ModelSpec:
    """``b = a_i + v - r x + s <mu, x>`` with mean-field jump intensity.

    ``lambda = clip(lam_i + lam_mean * <mu, x>, 0, lam_max)``, ``sigma = sigma_i``,
    running cost ``0.5 * rv * v^2 + q * min((x - target)^2, cap)`` and terminal
    cost ``qT * min((x - target)^2, cap)``.  The drift is clipped to
    ``[-b_max, b_max]`` so the coefficients stay bounded.
    """
    p = dict(params or {})
    delta = float(p.get("delta", 1.0))
    a_tab = _regime_table(p.get("a", 0.0), n_regimes)
    s_tab = _regime_table(p.get("sigma", 0.5), n_regimes)
    l_tab = _regime_table(p.get("lam", 0.5), n_regimes)
    r = float(p.get("r", 1.0))
    s = float(p.get("s", 0.5))
    lam_mean = float(p.get("lam_mean", 0.0))
    lam_max = float(p.get("lam_max", 5.0))
    b_max = float(p.get("b_max", 50.0))
    rv = float(p.get("rv", 1.0))
    q = float(p.get("q", 0.0))
    qT = float(p.get("qT", 1.0))
    target = float(p.get("target", 0.0))
    cap = float(p.get("cap", 100.0))

    def b(t, x, m, v, i):
        return np.clip(_col(a_tab[i]) + v[:, 0:1] - r * x + s * m[:, 0:1], -b_max, b_max)

    def lam(t, x, m, v, i):
        return np.clip(_col(l_tab[i]) + lam_mean * m[:, 0:1], 0.0, lam_max) + 0.0 * x

    def f(t, x, m, v, i):
        return 0.5 * rv * v[:, 0:1] ** 2 + q * np.minimum((x - target) ** 2, cap)

    def h(t, x, m, i):
        return qT * np.minimum((x - target) ** 2, cap)

    A = ControlBox.interval(*p.get("A", (-1.0, 1.0)))
    return ModelSpec(
        b=b,
        sigma=lambda t, x, m, v, i: _col(s_tab[i]) + 0.0 * x,
        lam=lam,
        f=f,
        h=h,
        A=A,
        jump=_jump_from_params(p, delta, D),
        T=float(p.get("T", 1.0)),
        n_regimes=n_regimes,
        moment_index=(1,),
        C0=float(p.get("C0", b_max + float(np.max(s_tab)) + lam_max)),
        kappa0=float(p.get("kappa0", r + s + abs(lam_mean) + 1.0)),
        kappa1=float(p.get("kappa1", 2 * math.sqrt(cap) * (q + qT) + 1.0)),
        delta=delta,
        name="linear_mean_reverting",
        params=p,
    )


def lq_regime(params: dict | None = None, n_regimes: int = 1, D: int = 6) -> ModelSpec:
    """Control enters the drift linearly and the running cost quadratically.

    ``b = a_i + v``, ``sigma = sigma_i``, ``lambda = lam_i``, running cost
    ``0.5 * rv * v^2`` and terminal cost ``min(|<mu, x> - target|, cap)``.
    The terminal cost is Lipschitz but not smooth in the measure, so the
    finite-population value carries the full ``N^{-1/2}`` fluctuation of the
    empirical mean.
    """
    p = dict(params or {})
    delta = float(p.get("delta", 1.0))
    a_tab = _regime_table(p.get("a", 0.0), n_regimes)
    s_tab = _regime_table(p.get("sigma", 1.0), n_regimes)
    l_tab = _regime_table(p.get("lam", 1.0), n_regimes)
    rv = float(p.get("rv", 1.0))
    target = float(p.get("target", 0.0))
    cap = float(p.get("cap", 10.0))
    A = ControlBox.interval(*p.get("A", (-1.0, 1.0)))
    T = float(p.get("T", 1.0))

    def h(t, x, m, i):
        return np.minimum(np.abs(m[:, 0:1] - target), cap) + 0.0 * x

    def argmax(t, mu, i0, dm):
        # H^v = -<mu, 0.5 rv v^2 + (a_i + v) Dm'> - const: concave quadratic in v
        slope = float(np.dot(mu.weights, dm.deriv(1)(mu.positions)))
        return A.clamp(np.array([-slope / rv]))

    def optimal(problem, t0, rho0, i0):
        # Mean-field optimum in the regime-feedback class: constant drive
        # placing the conditional mean on the kink (Jensen on both terms).
        from .control import FeedbackControl

        m0 = float(np.dot(rho0.weights, rho0.positions))
        drift = float(np.mean(a_tab)) if np.ptp(a_tab) == 0 else None
        if drift is None:
            return None
        v = (target - m0) / (T - t0) - drift
        # the kink stays optimal only while the marginal running cost is below 1
        if abs(rv * v) > 1.0 or not A.low[0] <= v <= A.high[0]:
            return None
        return FeedbackControl.constant(np.full((n_regimes, 1), v), A)

    return ModelSpec(
        b=lambda t, x, m, v, i: _col(a_tab[i]) + v[:, 0:1] + 0.0 * x,
        sigma=lambda t, x, m, v, i: _col(s_tab[i]) + 0.0 * x,
        lam=lambda t, x, m, v, i: _col(l_tab[i]) + 0.0 * x,
        f=lambda t, x, m, v, i: 0.5 * rv * v[:, 0:1] ** 2 + 0.0 * x,
        h=h,
        A=A,
        jump=_jump_from_params(p, delta, D),
        T=T,
        n_regimes=n_regimes,
        moment_index=(1,),
        C0=float(p.get("C0", float(np.max(np.abs(a_tab))) + max(abs(A.low[0]), abs(A.high[0])) + float(np.max(s_tab)) + float(np.max(l_tab)))),
        kappa0=float(p.get("kappa0", 1.0)),
        kappa1=float(p.get("kappa1", 1.0 + rv * max(abs(A.low[0]), abs(A.high[0])))),
        delta=delta,
        name="lq_regime",
        params=p,
        hamiltonian_argmax=argmax,
        optimal_control=optimal,
    )


MODEL_LIBRARY = {
    "constant": constant_model,
    "linear_mean_reverting": linear_mean_reverting,
    "lq_regime": lq_regime,
}


def make_model(name: str, params: dict | None = None, n_regimes: int = 1, D: int = 6) -> ModelSpec:
    try:
        builder = MODEL_LIBRARY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_LIBRARY)}") from None
    return builder(params, n_regimes=n_regimes, D=D)
