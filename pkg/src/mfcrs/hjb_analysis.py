"""
Calculus on cylindrical polynomials ``phi(t, mu, i) = F_i(t, <mu, f>)``:
linear derivatives, HJB residuals with regime coupling, Ito/Dynkin checks,
empirical-projection derivative identities, the N-agent remainders and a
dynamic-programming check on finite control classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import mpmath
import numpy as np
from numpy.polynomial import polynomial as P
from numpy.typing import NDArray

from .control import HamiltonianInput, hamiltonian_sup
from .measure_metric import DiscreteMeasure, Polynomial, jump_image
from .model import ModelSpec
from .regime_chain import GeneratorMatrix, validate_generator
from .simulate import SimConfig, cost_estimate, power_moments, simulate_meanfield, time_grid


@dataclass
class CheckReport:
    check_name: str
    statistic: float
    tolerance: float
    passed: bool
    detail: dict | None = None

    def to_dict(self) -> dict:
        out = {"check_name": self.check_name, "statistic": self.statistic, "tolerance": self.tolerance, "pass": self.passed}
        if self.detail:
            out["detail"] = self.detail
        return out


@dataclass(frozen=True)
class CylindricalPolynomial:
    """``phi(t, mu, i) = F_i(t, <mu, f>)`` with ``F_i(t, y) = sum_ab C[i, a, b] t^a y^b``."""

    inner: Polynomial
    outer: NDArray[np.float64]

    def __post_init__(self):
        C = np.asarray(self.outer, dtype=np.float64)
        if C.ndim != 3:
            raise ValueError("outer coefficients must have shape (regimes, t-degree+1, y-degree+1)")
        C.setflags(write=False)
        object.__setattr__(self, "outer", C)

    @classmethod
    def of(cls, inner: Polynomial, F_y, n_regimes: int = 1) -> "CylindricalPolynomial":
        """Time-independent ``F_i(y) = sum_b F_y[b] y^b``, identical in every regime."""
        c = np.asarray(F_y, dtype=np.float64)[None, None, :]
        return cls(inner, np.repeat(c, n_regimes, axis=0))

    @property
    def n_regimes(self) -> int:
        return self.outer.shape[0]

    def F(self, t, y, i: int, dt: int = 0, dy: int = 0):
        C = self.outer[i]
        if dt:
            C = P.polyder(C, m=dt, axis=0) if C.shape[0] > dt else np.zeros((1, 1))
        if dy:
            C = P.polyder(C, m=dy, axis=1) if C.shape[1] > dy else np.zeros((1, 1))
        return P.polyval2d(t, y, C) if np.ndim(y) == 0 else P.polyval2d(np.broadcast_to(t, np.shape(y)), y, C)

    def feature(self, mu: DiscreteMeasure) -> float:
        return float(np.dot(mu.weights, self.inner(mu.positions)))

    def __call__(self, t: float, mu: DiscreteMeasure, i: int) -> float:
        return float(self.F(t, self.feature(mu), i))


def linear_derivative(phi: CylindricalPolynomial, t: float, mu: DiscreteMeasure, i: int) -> Polynomial:
    """``D_m phi(t, mu, i, .) = dF_i/dy(t, <mu, f>) f``."""
    return phi.inner.scale(float(phi.F(t, phi.feature(mu), i, dy=1)))


def second_linear_derivative(phi: CylindricalPolynomial, t: float, mu: DiscreteMeasure, i: int) -> float:
    """Coefficient of ``f (x) f`` in ``D^2_{m^2} phi``."""
    return float(phi.F(t, phi.feature(mu), i, dy=2))


def derivative_identity_residual(phi: CylindricalPolynomial, t: float, mu: DiscreteMeasure, nu: DiscreteMeasure, i: int, n_quad: int = 64) -> float:
    """``|phi(mu) - phi(nu) - int_0^1 <mu - nu, D_m phi(r mu + (1-r) nu)> dr|``."""
    z, w = np.polynomial.legendre.leggauss(n_quad)
    r, w = 0.5 * (z + 1.0), 0.5 * w
    integral = 0.0
    for rk, wk in zip(r, w):
        mix = mu.mix(nu, float(rk))
        dm = linear_derivative(phi, t, mix, i)
        integral += wk * (np.dot(mu.weights, dm(mu.positions)) - np.dot(nu.weights, dm(nu.positions)))
    return abs(phi(t, mu, i) - phi(t, nu, i) - integral)


def _derivatives(phi: CylindricalPolynomial, t: float, mu: DiscreteMeasure) -> tuple[Polynomial, ...]:
    return tuple(linear_derivative(phi, t, mu, j) for j in range(phi.n_regimes))


def hjb_residual(phi: CylindricalPolynomial, t: float, mu: DiscreteMeasure, i0: int, spec: ModelSpec, Q, grid_resolution: int = 41) -> float:
    """``-d_t phi + sup_v H^v(t, mu, i0, D_m phi) - sum_j q_{i0 j} (phi(j) - phi(i0))``."""
    Q = Q if isinstance(Q, GeneratorMatrix) else validate_generator(Q)
    y = phi.feature(mu)
    dt_phi = float(phi.F(t, y, i0, dt=1))
    inp = HamiltonianInput(t, mu, i0, _derivatives(phi, t, mu))
    h_sup, _ = hamiltonian_sup(inp, spec, grid_resolution)
    vals = np.array([phi.F(t, y, j) for j in range(Q.s0)])
    coupling = float(Q.q[i0] @ (vals - vals[i0]))
    return -dt_phi + h_sup - coupling


def rk4_regime_offsets(b: Sequence[float], Q, T: float, dt: float = 1e-4) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Solve ``c' = -b - Q c`` backwards from ``c(T) = 0`` by classical RK4.

    Returns the grid and ``c`` of shape ``(len(grid), s0)``.
    """
    Q = Q if isinstance(Q, GeneratorMatrix) else validate_generator(Q)
    b = np.asarray(b, dtype=np.float64)
    n = int(round(T / dt))
    h = T / n
    c = np.zeros(Q.s0)
    out = np.empty((n + 1, Q.s0))
    out[n] = c

    def rhs(c):
        return -b - Q.q @ c

    for k in range(n, 0, -1):
        # integrate backwards: step of -h
        k1 = rhs(c)
        k2 = rhs(c - 0.5 * h * k1)
        k3 = rhs(c - 0.5 * h * k2)
        k4 = rhs(c - h * k3)
        c = c - h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[k - 1] = c
    return np.linspace(0.0, T, n + 1), out


def linear_value_function(b: Sequence[float], Q, T: float, degree: int = 16, dt: float = 1e-4) -> CylindricalPolynomial:
    """``V(t, mu, i) = <mu, x> + c_i(t)`` for ``b = b_i``, ``h(x) = x``, no noise.

    ``c_i`` comes from the RK4 oracle and is fitted by a Chebyshev series
    converted to a power series in ``t``.
    """
    grid, c = rk4_regime_offsets(b, Q, T, dt)
    s0 = c.shape[1]
    C = np.zeros((s0, degree + 1, 2))
    for i in range(s0):
        fit = np.polynomial.Chebyshev.fit(grid, c[:, i], degree, domain=[0.0, T])
        coef = fit.convert(kind=np.polynomial.Polynomial, domain=[0.0, T], window=[0.0, T]).coef
        C[i, : coef.size, 0] = coef
        C[i, 0, 1] = 1.0
    return CylindricalPolynomial(Polynomial((0.0, 1.0)), C)


def ito_martingale_test(
    phi: CylindricalPolynomial,
    spec: ModelSpec,
    control,
    t0: float,
    rho0,
    i0: int,
    u: float,
    config: SimConfig,
    Q=((0.0,),),
) -> tuple[float, float]:
    """Monte-Carlo mean and SE of the compensated Ito statistic.

    Per replication: ``phi(u, mu_u, a_u) - phi(t0, mu_t0, i0) - int_t0^u [d_s phi
    + <mu_s, L D_m phi> + sum_j q_{a j} (phi(j) - phi(a))] ds``, with the
    time integral by the trapezoid rule on the simulation grid and the
    measure proxied by ``config.n_mf`` particles.
    """
    if not t0 < u <= spec.T + 1e-12:
        raise ValueError("need t0 < u <= T")
    Q = Q if isinstance(Q, GeneratorMatrix) else validate_generator(Q)
    short = replace(spec, T=float(u))
    grid = time_grid(t0, u, config.dt)
    R = config.mc_reps
    f = phi.inner
    df, d2f, gf = f.deriv(1), f.deriv(2), jump_image(f, spec.jump.moments)
    D = max(max(spec.moment_index), max(getattr(control, "features", (1,)) or (1,)))
    phi_vals = np.zeros((R, len(grid)))
    integrand = np.zeros((R, len(grid)))
    s0 = Q.s0

    def observe(k, t, x, alpha, rows):
        feats = power_moments(x, D)
        m = feats[:, [j - 1 for j in spec.moment_index]]
        v = control.evaluate_rows(t, feats, alpha, None)
        y = f(x).mean(axis=1)
        Fa = np.empty_like(y)
        Fy = np.empty_like(y)
        Ft = np.empty_like(y)
        Fj = np.stack([phi.F(t, y, j) for j in range(s0)], axis=1)
        for j in range(s0):
            sel = alpha == j
            if np.any(sel):
                Fa[sel] = Fj[sel, j]
                Fy[sel] = phi.F(t, y[sel], j, dy=1)
                Ft[sel] = phi.F(t, y[sel], j, dt=1)
        b = np.broadcast_to(spec.b(t, x, m, v, alpha), x.shape)
        sig = np.broadcast_to(spec.sigma(t, x, m, v, alpha), x.shape)
        lam = np.broadcast_to(spec.lam(t, x, m, v, alpha), x.shape)
        gen = (b * df(x) + 0.5 * sig**2 * d2f(x) + lam * gf(x)).mean(axis=1)
        chain = np.einsum("rj,rj->r", Q.q[alpha], Fj - Fa[:, None])
        phi_vals[rows, k] = Fa
        integrand[rows, k] = Ft + Fy * gen + chain

    simulate_meanfield(t0, rho0, i0, control, short, replace(config, record_degree=1), Q=Q, observer=observe)
    dts = np.diff(grid)
    integral = 0.5 * (integrand[:, 1:] + integrand[:, :-1]) @ dts
    stat = phi_vals[:, -1] - phi_vals[:, 0] - integral
    return float(np.mean(stat)), float(np.std(stat, ddof=1) / math.sqrt(R)) if R > 1 else 0.0


def _mp_poly(coefs, x):
    out = mpmath.mpf(0)
    for c in reversed(coefs):
        out = out * x + mpmath.mpf(float(c))
    return out


def _mp_F(phi: CylindricalPolynomial, t: float, y, i: int):
    C = phi.outer[i]
    tt = mpmath.mpf(float(t))
    out = mpmath.mpf(0)
    for a in range(C.shape[0]):
        for b in range(C.shape[1]):
            if C[a, b] != 0.0:
                out += mpmath.mpf(float(C[a, b])) * tt**a * y**b
    return out


def projection_derivative_check(phi: CylindricalPolynomial, x, i0: int, t: float = 0.0, dps: int = 40) -> dict:
    """Compare finite differences of ``phi^N(x) = phi(t, mu^N(x), i0)`` with
    the analytic first and second derivatives of the empirical projection.

    Finite differences are taken in extended precision with step
    ``1e-5 (1 + |x_i|)``; errors are relative to the largest analytic entry,
    or absolute when that entry is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    if N < 2:
        raise ValueError("need at least two particles")
    f = phi.inner
    y = float(np.mean(f(x)))
    Fy = float(phi.F(t, y, i0, dy=1))
    Fyy = float(phi.F(t, y, i0, dy=2))
    d1 = Fy * f.deriv(1)(x) / N
    d2 = Fy * f.deriv(2)(x) / N + Fyy * f.deriv(1)(x) ** 2 / N**2
    fc = f.coefficients
    fd1 = np.empty(N)
    fd2 = np.empty(N)
    with mpmath.workdps(dps):
        vals = [_mp_poly(fc, mpmath.mpf(float(v))) for v in x]
        base_sum = mpmath.fsum(vals)

        def phiN(k, xk):
            s = base_sum - vals[k] + _mp_poly(fc, xk)
            return _mp_F(phi, t, s / N, i0)

        for k in range(N):
            h = mpmath.mpf(1e-5 * (1.0 + abs(float(x[k]))))
            xk = mpmath.mpf(float(x[k]))
            up, mid, dn = phiN(k, xk + h), phiN(k, xk), phiN(k, xk - h)
            fd1[k] = float((up - dn) / (2 * h))
            fd2[k] = float((up - 2 * mid + dn) / h**2)
    # identically zero analytic derivatives fall back to absolute error
    scale1 = float(np.max(np.abs(d1))) or 1.0
    scale2 = float(np.max(np.abs(d2))) or 1.0
    e1 = float(np.max(np.abs(fd1 - d1))) / scale1
    e2 = float(np.max(np.abs(fd2 - d2))) / scale2
    return {"first_rel_error": e1, "second_rel_error": e2, "max_rel_error": max(e1, e2), "analytic_first": d1, "analytic_second": d2}


def _coefficients_at(spec: ModelSpec, t: float, x: NDArray[np.float64], v, i0: int):
    xs = x[None, :]
    feats = spec.features(xs)
    vv = np.atleast_2d(np.asarray(v, dtype=np.float64))
    i = np.array([i0])
    shape = xs.shape
    return tuple(np.broadcast_to(fn(t, xs, feats, vv, i), shape)[0] for fn in (spec.b, spec.sigma, spec.lam, spec.f))


def remainder_terms(phi: CylindricalPolynomial, t: float, x, i0: int, v, spec: ModelSpec, n_quad: int = 16) -> tuple[float, float]:
    """``(R1, R2)`` with ``H^v_N(x) = H^v(t, mu^N(x), i0, D_m phi) + R1 + R2``.

    ``H^v_N`` is the N-agent pre-Hamiltonian of ``phi^N(x) = phi(t, mu^N(x), i0)``
    (see :func:`nagent_hamiltonian`).  ``R1`` collects the second-order
    measure derivative, ``R2`` the jump bracket with the shifted measures
    ``mu^N + (r/N)(delta_{x+y} - delta_x)``; the ``r``-integral uses Gauss-Legendre
    quadrature of order ``n_quad`` (exact for polynomial ``F`` of degree
    ``<= 2 n_quad``) and the ``gamma``-integral uses the jump law's exact
    quadrature rule.
    """
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    f = phi.inner
    b, s, lam, _ = _coefficients_at(spec, t, x, v, i0)
    y0 = float(np.mean(f(x)))
    Fy0 = float(phi.F(t, y0, i0, dy=1))
    Fyy0 = float(phi.F(t, y0, i0, dy=2))
    R1 = -float(np.mean(0.5 * s**2 * Fyy0 * f.deriv(1)(x) ** 2)) / N
    z, w = np.polynomial.legendre.leggauss(n_quad)
    r, w = 0.5 * (z + 1.0), 0.5 * w
    fx = f(x)

    def bracket(y):
        delta = f(x + y) - fx  # (N,)
        yr = y0 + np.outer(r, delta) / N  # (n_quad, N)
        shift = (phi.F(t, yr, i0, dy=1) - Fy0) * delta[None, :]
        return w @ shift  # (N,)

    nodes, gw = spec.jump.quadrature(n_quad)
    jump = sum(wk * bracket(float(yk)) for yk, wk in zip(nodes, gw))
    R2 = -float(np.mean(lam * jump))
    return R1, R2


def nagent_hamiltonian(phi: CylindricalPolynomial, t: float, x, i0: int, v, spec: ModelSpec, n_quad: int = 16) -> float:
    """Direct N-agent pre-Hamiltonian of ``phi^N``, written out particle by particle.

    ``-(1/N) sum_k f_k - sum_k [b_k d_k + s_k^2/2 d_kk] phi^N - sum_k lam_k
    int (phi^N(x + y e_k) - phi^N(x)) gamma(dy)``.
    """
    x = np.asarray(x, dtype=np.float64)
    N = x.size
    f = phi.inner
    b, s, lam, fc = _coefficients_at(spec, t, x, v, i0)
    fx = f(x)
    y0 = float(np.mean(fx))
    Fy, Fyy = float(phi.F(t, y0, i0, dy=1)), float(phi.F(t, y0, i0, dy=2))
    d1 = Fy * f.deriv(1)(x) / N
    d2 = Fy * f.deriv(2)(x) / N + Fyy * f.deriv(1)(x) ** 2 / N**2
    F0 = float(phi.F(t, y0, i0))
    nodes, gw = spec.jump.quadrature(n_quad)
    jump = np.zeros(N)
    for yk, wk in zip(nodes, gw):
        jump += wk * (phi.F(t, y0 + (f(x + yk) - fx) / N, i0) - F0)
    return -float(np.mean(fc)) - float(np.sum(b * d1 + 0.5 * s**2 * d2 + lam * jump))


def mean_field_pre_hamiltonian(phi: CylindricalPolynomial, t: float, x, i0: int, v, spec: ModelSpec) -> float:
    from .control import pre_hamiltonian

    mu = DiscreteMeasure.empirical(x)
    inp = HamiltonianInput(t, mu, i0, _derivatives(phi, t, mu))
    return float(pre_hamiltonian(inp, np.atleast_1d(v), spec))


def dpp_check(
    spec: ModelSpec,
    controls: Sequence,
    t0: float,
    rho0,
    i0: int,
    theta: float,
    config: SimConfig,
    Q=((0.0,),),
) -> dict:
    """Dynamic-programming gap on a finite control class.

    Direct side: ``min_c J(c)`` over ``[t0, T]``.  Split side: for each
    first-stage control the running cost up to ``theta`` plus a continuation
    value tabulated per regime at ``theta``; the continuation restarts every
    replication from its own particle cloud at ``theta`` and minimises over
    the same class.  Returns the gap and the combined standard error.
    """
    if not 1 <= len(controls) <= 8:
        raise ValueError("control class must have between 1 and 8 members")
    if not t0 < theta < spec.T:
        raise ValueError("need t0 < theta < T")
    Q = Q if isinstance(Q, GeneratorMatrix) else validate_generator(Q)
    direct = []
    for c in controls:
        rec = simulate_meanfield(t0, rho0, i0, c, spec, config, Q=Q)
        direct.append(cost_estimate(rec) if rec.reps > 1 else (float(rec.cost[0]), 0.0))
    k_direct = int(np.argmin([m for m, _ in direct]))

    first = replace(spec, T=float(theta))
    cont_cfg = replace(config, seed=config.seed + 1)
    split = []
    for c1 in controls:
        rec = _first_stage(t0, rho0, i0, c1, first, config, Q)
        run_cost = rec.running_cost[:, -1]
        alpha = rec.regimes[:, -1]
        total = run_cost.copy()
        for j in np.unique(alpha):
            sel = np.flatnonzero(alpha == j)
            clouds = rec.terminal[sel]
            best = None
            for c2 in controls:
                cfg_j = replace(cont_cfg, mc_reps=len(sel))
                r2 = simulate_meanfield(float(theta), clouds, int(j), c2, spec, cfg_j, Q=Q)
                if best is None or r2.cost.mean() < best.mean():
                    best = r2.cost
            total[sel] += best
        n = total.size
        split.append((float(np.mean(total)), float(np.std(total, ddof=1) / math.sqrt(n)) if n > 1 else 0.0))
    k_split = int(np.argmin([m for m, _ in split]))
    value = direct[k_direct][0]
    gap = abs(split[k_split][0] - value)
    se = math.hypot(direct[k_direct][1], split[k_split][1])
    return {"gap": gap, "se": se, "value": value, "split_value": split[k_split][0], "direct": direct, "split": split}


def _first_stage(t0, rho0, i0, control, spec, config, Q):
    return simulate_meanfield(t0, rho0, i0, control, spec, replace(config, record_degree=1), Q=Q, keep_terminal=True)
