"""
Polynomial test family, weighted moment metric and exponential moments.

Measures are finite atom sets (:class:`DiscreteMeasure`).  The metric is

    d(mu, nu) = sum_j c_j |<mu - nu, f_j>|

over a truncated polynomial family closed under differentiation and under
the jump map ``g -> sum_k m_k g^(k)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from numpy.typing import NDArray

DEFAULT_DEGREE_CAP = 12


class DegreeTooLarge(ValueError):
    pass


class DivergentJumpMoment(ValueError):
    pass


@dataclass(frozen=True)
class Polynomial:
    """Real polynomial, ``coefficients[k]`` multiplies ``x**k``.

    Trailing zeros are stripped; the zero polynomial has ``coefficients == ()``.
    """

    coefficients: tuple[float, ...]

    def __post_init__(self):
        c = [float(a) for a in self.coefficients]
        while c and c[-1] == 0.0:
            c.pop()
        object.__setattr__(self, "coefficients", tuple(c))

    @classmethod
    def monomial(cls, k: int, scale: float = 1.0) -> "Polynomial":
        return cls((0.0,) * k + (scale,))

    @classmethod
    def constant(cls, a: float) -> "Polynomial":
        return cls((a,))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def is_zero(self) -> bool:
        return not self.coefficients

    def __call__(self, x):
        if self.is_zero:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return P.polyval(x, self.coefficients)

    def deriv(self, k: int = 1) -> "Polynomial":
        if k == 0 or self.is_zero:
            return self
        if k > self.degree:
            return Polynomial(())
        return Polynomial(tuple(P.polyder(self.coefficients, k)))

    def __add__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial(tuple(P.polyadd(self.coefficients or (0.0,), other.coefficients or (0.0,))))

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "Polynomial":
        return Polynomial(tuple(a * c for c in self.coefficients))

    def padded(self, n: int) -> NDArray[np.float64]:
        out = np.zeros(n)
        out[: len(self.coefficients)] = self.coefficients
        return out


def jump_image(g: Polynomial, m: NDArray[np.float64] | list[float]) -> Polynomial:
    """``sum_{k>=1} m_k g^(k)`` with ``m[k-1] = m_k``.

    By Taylor's formula this equals ``int (g(x+y) - g(x)) gamma(dy)``.
    """
    out = Polynomial(())
    for k in range(1, g.degree + 1):
        if k - 1 >= len(m):
            raise ValueError(f"jump moment m_{k} not supplied")
        out = out + g.deriv(k).scale(float(m[k - 1]))
    return out


@dataclass(frozen=True)
class PolynomialBasis:
    """Truncation of the closed polynomial family at degree ``max_degree``.

    ``derivative_index[(j, k)]`` is the position of ``f_j^(k)`` and
    ``jump_image_index[j]`` that of the jump image of ``f_j`` (absent when the
    image is the zero polynomial).
    """

    polys: tuple[Polynomial, ...]
    derivative_index: dict[tuple[int, int], int]
    jump_image_index: dict[int, int]
    max_degree: int
    jump_moments: tuple[float, ...]
    _coef: NDArray[np.float64] = field(init=False, repr=False, compare=False)
    _children: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        coef = np.array([p.padded(self.max_degree + 1) for p in self.polys])
        coef.setflags(write=False)
        object.__setattr__(self, "_coef", coef)
        children: list[list[int]] = [[] for _ in self.polys]
        for (a, _), i in self.derivative_index.items():
            children[a].append(i)
        for a, i in self.jump_image_index.items():
            children[a].append(i)
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))

    def __len__(self) -> int:
        return len(self.polys)

    @property
    def coefficient_matrix(self) -> NDArray[np.float64]:
        """Rows are basis polynomials in the power basis ``1, x, ..., x^D``."""
        return self._coef

    def descendants(self, j: int) -> set[int]:
        """Indices reachable from ``j`` by repeated closure operations."""
        seen = {j}
        stack = [j]
        while stack:
            for i in self._children[stack.pop()]:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return seen

    def to_dict(self) -> dict:
        return {
            "max_degree": self.max_degree,
            "jump_moments": list(self.jump_moments),
            "polys": [list(p.coefficients) for p in self.polys],
            "derivative_index": [[j, k, i] for (j, k), i in sorted(self.derivative_index.items())],
            "jump_image_index": [[j, i] for j, i in sorted(self.jump_image_index.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolynomialBasis":
        return cls(
            tuple(Polynomial(tuple(c)) for c in d["polys"]),
            {(int(j), int(k)): int(i) for j, k, i in d["derivative_index"]},
            {int(j): int(i) for j, i in d["jump_image_index"]},
            int(d["max_degree"]),
            tuple(float(m) for m in d["jump_moments"]),
        )


def build_basis(D: int, jump_moments, degree_cap: int = DEFAULT_DEGREE_CAP) -> PolynomialBasis:
    """Close ``{x, ..., x^D}`` under differentiation and the jump map."""
    if D < 1:
        raise ValueError("D must be at least 1")
    if D > degree_cap:
        raise DegreeTooLarge(f"D={D} exceeds cap {degree_cap}")
    m = [float(a) for a in jump_moments]
    if len(m) < D:
        raise ValueError(f"need jump moments m_1..m_{D}, got {len(m)}")
    m = m[:D]

    polys: list[Polynomial] = []
    where: dict[tuple[float, ...], int] = {}

    def add(p: Polynomial) -> tuple[int, bool]:
        key = p.coefficients
        if key in where:
            return where[key], False
        where[key] = len(polys)
        polys.append(p)
        return where[key], True

    # each monomial is closed before the next one is added, so the basis for
    # a smaller D is a prefix of the basis for a larger one
    level: dict[int, int] = {}
    deriv_index: dict[tuple[int, int], int] = {}
    jump_index: dict[int, int] = {}
    for top in range(1, D + 1):
        idx, new = add(Polynomial.monomial(top))
        queue = [idx] if new else []
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            level.setdefault(j, top)
            g = polys[j]
            for k in range(0, g.degree + 1):
                idx, new = add(g.deriv(k))
                deriv_index[(j, k)] = idx
                if new:
                    queue.append(idx)
            img = jump_image(g, m)
            if not img.is_zero:
                idx, new = add(img)
                jump_index[j] = idx
                if new:
                    queue.append(idx)
    # closure operations lower the degree, so within a level degree order puts
    # every descendant before its ancestors and keeps the weight floor mild
    order = sorted(range(len(polys)), key=lambda i: (level[i], polys[i].degree, i))
    rank = {old: new for new, old in enumerate(order)}
    return PolynomialBasis(
        tuple(polys[i] for i in order),
        {(rank[j], k): rank[i] for (j, k), i in deriv_index.items()},
        {rank[j]: rank[i] for j, i in jump_index.items()},
        D,
        tuple(m),
    )


def moment_bound(p: Polynomial, b: float, delta: float) -> float:
    """Certified bound on ``sup |<mu, p>|`` over ``{mu : <mu, e_delta> <= b}``.

    Uses ``|x|^k <= k! e^{delta|x|} / delta^k`` and
    ``<mu, e^{delta|x|}> <= e^delta b``.
    """
    s = 0.0
    for k, a in enumerate(p.coefficients):
        s += abs(a) * math.factorial(k) * math.exp(delta) * b / delta**k
    return s


@dataclass(frozen=True)
class WeightSequence:
    c: NDArray[np.float64]
    b: float
    delta: float
    bounds: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.c)

    def to_dict(self) -> dict:
        return {"c": self.c.tolist(), "b": self.b, "delta": self.delta, "bounds": self.bounds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightSequence":
        return cls(np.array(d["c"]), float(d["b"]), float(d["delta"]), np.array(d["bounds"]))


def make_weights(basis: PolynomialBasis, b: float, delta: float) -> WeightSequence:
    """Explicit weights satisfying the three structural requirements.

    ``c_j = 2^{-j} / max(1, B_j^2)`` (``j`` 1-based) then lowered to the
    minimum over all closure descendants, so a polynomial never outweighs
    anything derived from it.
    """
    if b < 1:
        raise ValueError("b must be at least 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    B = np.array([moment_bound(p, b, delta) for p in basis.polys])
    j = np.arange(1, len(basis) + 1, dtype=np.float64)
    raw = 2.0**-j / np.maximum(1.0, B**2)
    c = np.array([raw[sorted(basis.descendants(i))].min() for i in range(len(basis))])
    return WeightSequence(c, float(b), float(delta), B)


def check_weights(basis: PolynomialBasis, w: WeightSequence) -> dict[str, bool]:
    """Direct scan of the weight invariants."""
    j = np.arange(1, len(basis) + 1, dtype=np.float64)
    dyadic = bool(np.all(w.c <= 2.0**-j) and np.all(w.c > 0))
    monotone = all(w.c[a] <= w.c[sorted(basis.descendants(a))].min() for a in range(len(basis)))
    normalised = bool(np.sum(w.c * w.bounds**2) <= 1.0)
    return {"dyadic": dyadic, "closure_monotone": monotone, "normalised": normalised}


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure with finitely many atoms."""

    positions: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if x.shape != w.shape or x.size == 0:
            raise ValueError("need matching, non-empty positions and weights")
        if np.any(w <= 0.0):
            raise ValueError("atom weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, atoms, normalise: bool = False) -> "DiscreteMeasure":
        arr = np.asarray(atoms, dtype=np.float64).reshape(-1, 2)
        w = arr[:, 1]
        if normalise:
            w = w / w.sum()
        return cls(arr[:, 0], w)

    @classmethod
    def dirac(cls, x: float) -> "DiscreteMeasure":
        return cls(np.array([x]), np.array([1.0]))

    @classmethod
    def empirical(cls, x) -> "DiscreteMeasure":
        x = np.asarray(x, dtype=np.float64).ravel()
        return cls(x, np.full(x.size, 1.0 / x.size))

    def mix(self, other: "DiscreteMeasure", a: float) -> "DiscreteMeasure":
        """``a * self + (1 - a) * other``; zero-weight parts are dropped."""
        parts_x, parts_w = [], []
        if a > 0:
            parts_x.append(self.positions)
            parts_w.append(a * self.weights)
        if a < 1:
            parts_x.append(other.positions)
            parts_w.append((1.0 - a) * other.weights)
        w = np.concatenate(parts_w)
        return DiscreteMeasure(np.concatenate(parts_x), w / w.sum())

    def moments(self, D: int) -> NDArray[np.float64]:
        """``(<mu, x^k>)_{k=0..D}``."""
        return np.array([np.dot(self.weights, self.positions**k) for k in range(D + 1)])

    def sample(self, rng: np.random.Generator, size) -> NDArray[np.float64]:
        return rng.choice(self.positions, size=size, p=self.weights)

    def to_dict(self) -> dict:
        return {"atoms": [[float(x), float(w)] for x, w in zip(self.positions, self.weights)]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteMeasure":
        return cls.from_atoms(d["atoms"], normalise=bool(d.get("normalise", False)))


def pairing(mu: DiscreteMeasure, f: Polynomial) -> float:
    return float(np.dot(mu.weights, f(mu.positions)))


def _basis_differences(mu: DiscreteMeasure, nu: DiscreteMeasure, basis: PolynomialBasis) -> NDArray[np.float64]:
    return np.array([pairing(mu, p) - pairing(nu, p) for p in basis.polys])


def metric_d(mu: DiscreteMeasure, nu: DiscreteMeasure, basis: PolynomialBasis, weights: WeightSequence) -> float:
    return float(np.dot(weights.c, np.abs(_basis_differences(mu, nu, basis))))


def dhat(mu: DiscreteMeasure, nu: DiscreteMeasure, basis: PolynomialBasis, weights: WeightSequence) -> float:
    return float(np.dot(weights.c, _basis_differences(mu, nu, basis) ** 2))


def metric_from_moments(m1, m2, basis: PolynomialBasis, weights: WeightSequence) -> NDArray[np.float64]:
    """Batch version of :func:`metric_d` from power moments ``k = 0..D``.

    ``m1`` and ``m2`` have trailing axis of length ``D + 1``; leading axes
    broadcast.
    """
    diff = (np.asarray(m1) - np.asarray(m2)) @ basis.coefficient_matrix.T
    return np.abs(diff) @ weights.c


def e_delta(x, delta: float):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(delta * (np.sqrt(x * x + 1.0) - 1.0))


def exp_moment(mu: DiscreteMeasure, delta: float) -> float:
    if delta <= 0:
        raise ValueError("delta must be positive")
    return float(np.dot(mu.weights, e_delta(mu.positions, delta)))


def kstar(delta: float, C0: float, gamma_exp_moment: float) -> float:
    """Growth rate of the exponential-moment envelope."""
    if not math.isfinite(gamma_exp_moment):
        raise DivergentJumpMoment("jump law has no finite exponential moment")
    if gamma_exp_moment < 1.0:
        raise ValueError("an exponential moment of a probability law is at least 1")
    return 0.5 * delta * C0 * (2.0 + C0 + delta * C0) + C0 * (gamma_exp_moment - 1.0)


def in_O_M(t: float, mu: DiscreteMeasure, M: int, delta: float, kstar_value: float) -> bool:
    if M <= 0:
        return False
    # log form: the envelope overflows for large rates
    return math.log(exp_moment(mu, delta)) <= math.log(M) + kstar_value * t


def moments_equal(mu: DiscreteMeasure, nu: DiscreteMeasure, D: int, tol: float = 1e-10) -> bool:
    return all(abs(pairing(mu, Polynomial.monomial(k)) - pairing(nu, Polynomial.monomial(k))) <= tol for k in range(1, D + 1))


def save_metric(path, basis: PolynomialBasis, weights: WeightSequence) -> None:
    with open(path, "w") as fh:
        json.dump({"basis": basis.to_dict(), "weights": weights.to_dict()}, fh, indent=1)


def load_metric(path) -> tuple[PolynomialBasis, WeightSequence]:
    with open(path) as fh:
        d = json.load(fh)
    return PolynomialBasis.from_dict(d["basis"]), WeightSequence.from_dict(d["weights"])
