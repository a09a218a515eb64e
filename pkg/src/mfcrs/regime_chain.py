"""
Finite-state continuous-time Markov chain acting as the common noise.

States are 0-based indices ``0..s0-1``.  Paths are stored event-wise (jump
times plus post-jump states) so that left limits and occupation times are
exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

SeedLike = "int | np.random.SeedSequence | np.random.Generator | None"


class NegativeRate(ValueError):
    pass


class RowSumViolation(ValueError):
    pass


class OutOfHorizon(ValueError):
    pass


class SameStatePair(ValueError):
    pass


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class GeneratorMatrix:
    """Validated rate matrix Q of a CTMC (rows sum to zero)."""

    q: NDArray[np.float64]

    @property
    def s0(self) -> int:
        return self.q.shape[0]

    def exit_rate(self, i: int) -> float:
        return -float(self.q[i, i])

    def to_list(self) -> list[list[float]]:
        return self.q.tolist()


def validate_generator(q) -> GeneratorMatrix:
    """Check a rate table and return it as a :class:`GeneratorMatrix`.

    Off-diagonal entries must be non-negative.  Row sums within ``1e-9`` of
    zero are repaired by resetting the diagonal to minus the off-diagonal
    sum; larger discrepancies raise :class:`RowSumViolation`.
    """
    a = np.array(q, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError("generator must be a non-empty square table")
    if not np.all(np.isfinite(a)):
        raise ValueError("generator entries must be finite")
    off = a - np.diag(np.diag(a))
    if np.any(off < 0.0):
        raise NegativeRate("off-diagonal rates must be non-negative")
    row = a.sum(axis=1)
    if np.any(np.abs(row) > 1e-9):
        bad = int(np.argmax(np.abs(row)))
        raise RowSumViolation(f"row {bad} sums to {row[bad]!r}, expected 0")
    a[np.diag_indices_from(a)] = -off.sum(axis=1)
    a.setflags(write=False)
    return GeneratorMatrix(a)


@dataclass(frozen=True)
class RegimePath:
    """One realisation of the chain on ``[t0, T]``.

    ``jump_times`` are strictly increasing in ``(t0, T]`` and ``states[k]`` is
    the state entered at ``jump_times[k]``.
    """

    i0: int
    jump_times: tuple[float, ...]
    states: tuple[int, ...]
    t0: float
    T: float
    _times: NDArray[np.float64] = field(init=False, repr=False, compare=False)
    _states: NDArray[np.int64] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.int64)
        if times.shape != states.shape:
            raise ValueError("jump_times and states must have equal length")
        if times.size:
            if np.any(np.diff(times) <= 0.0):
                raise ValueError("jump times must be strictly increasing")
            if times[0] <= self.t0 or times[-1] > self.T:
                raise ValueError("jump times must lie in (t0, T]")
            prev = np.concatenate([[self.i0], states[:-1]])
            if np.any(prev == states):
                raise ValueError("consecutive states must differ")
        object.__setattr__(self, "_times", times)
        object.__setattr__(self, "_states", states)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def state_at(self, s: float) -> tuple[int, int]:
        """Return ``(alpha_{s-}, alpha_s)``."""
        if s < self.t0 or s > self.T:
            raise OutOfHorizon(f"time {s} outside [{self.t0}, {self.T}]")
        left = self._left_index(np.asarray([s]))[0]
        right = int(np.searchsorted(self._times, s, side="right"))
        left_state = self.i0 if left == 0 else int(self._states[left - 1])
        right_state = self.i0 if right == 0 else int(self._states[right - 1])
        return left_state, right_state

    def _left_index(self, s: NDArray[np.float64]) -> NDArray[np.int64]:
        return np.searchsorted(self._times, s, side="left")

    def left_states(self, grid) -> NDArray[np.int64]:
        """Vectorised left limits ``alpha_{s-}`` on a time grid."""
        idx = self._left_index(np.asarray(grid, dtype=np.float64))
        table = np.concatenate([[self.i0], self._states])
        return table[idx]

    def right_states(self, grid) -> NDArray[np.int64]:
        idx = np.searchsorted(self._times, np.asarray(grid, dtype=np.float64), side="right")
        table = np.concatenate([[self.i0], self._states])
        return table[idx]

    def occupation_time(self, state: int, t: float) -> float:
        """Lebesgue measure of ``{s in [t0, t] : alpha_s = state}``."""
        if t < self.t0 or t > self.T:
            raise OutOfHorizon(f"time {t} outside [{self.t0}, {self.T}]")
        bounds = [self.t0, *[u for u in self.jump_times if u < t], t]
        visited = [self.i0, *[j for u, j in zip(self.jump_times, self.states) if u < t]]
        total = 0.0
        for k, st in enumerate(visited):
            if st == state:
                total += bounds[k + 1] - bounds[k]
        return total

    def count_transitions(self, i0: int, j0: int, t: float) -> int:
        prev = self.i0
        n = 0
        for u, st in zip(self.jump_times, self.states):
            if u > t:
                break
            if prev == i0 and st == j0:
                n += 1
            prev = st
        return n

    def to_json(self) -> str:
        return json.dumps(
            {
                "i0": self.i0,
                "jump_times": list(self.jump_times),
                "states": list(self.states),
                "t0": self.t0,
                "T": self.T,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RegimePath":
        d = json.loads(text)
        return cls(
            int(d["i0"]),
            tuple(float(u) for u in d["jump_times"]),
            tuple(int(j) for j in d["states"]),
            float(d["t0"]),
            float(d["T"]),
        )


def sample_path(Q: GeneratorMatrix, i0: int, t0: float, T: float, seed=None) -> RegimePath:
    """Sample a path by exponential holding times and embedded jumps."""
    if not t0 < T:
        raise ValueError("need t0 < T")
    if not 0 <= i0 < Q.s0:
        raise ValueError(f"state {i0} outside 0..{Q.s0 - 1}")
    rng = as_generator(seed)
    times: list[float] = []
    states: list[int] = []
    t, i = t0, i0
    while True:
        rate = Q.exit_rate(i)
        if rate <= 0.0:
            break
        t += rng.exponential(1.0 / rate)
        if t > T:
            break
        probs = np.clip(Q.q[i], 0.0, None)
        probs[i] = 0.0
        j = int(rng.choice(Q.s0, p=probs / probs.sum()))
        times.append(t)
        states.append(j)
        i = j
    return RegimePath(i0, tuple(times), tuple(states), t0, T)


def counting_martingale(path: RegimePath, Q: GeneratorMatrix, i0: int, j0: int, t: float) -> float:
    """``[M](t) - <M>(t)``: number of ``i0 -> j0`` jumps minus compensator."""
    if i0 == j0:
        raise SameStatePair("compensated counting martingale needs i0 != j0")
    if t < path.t0 or t > path.T:
        raise OutOfHorizon(f"time {t} outside [{path.t0}, {path.T}]")
    return path.count_transitions(i0, j0, t) - Q.q[i0, j0] * path.occupation_time(i0, t)


def transition_matrix(Q: GeneratorMatrix, t: float, tail: float = 1e-12) -> NDArray[np.float64]:
    """``exp(Q t)`` by uniformization.

    With ``L = max_i -q_ii`` and ``P = I + Q/L`` the result is the Poisson(L t)
    mixture of powers of ``P``; the sum stops once the remaining Poisson mass
    drops below ``tail``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    n = Q.s0
    lam = float(np.max(-np.diag(Q.q)))
    if t == 0.0 or lam == 0.0:
        return np.eye(n)
    P = np.eye(n) + Q.q / lam
    lt = lam * t
    # log-space Poisson weights keep large lt from underflowing e^{-lt}
    log_w = -lt
    k = 0
    term = np.eye(n)
    out = np.zeros((n, n))
    acc = 0.0
    while True:
        w = math.exp(log_w)
        out += w * term
        acc += w
        if 1.0 - acc < tail and k >= lt:
            break
        k += 1
        log_w += math.log(lt) - math.log(k)
        term = term @ P
        if k > 10 * lt + 1000:
            break
    return out / out.sum(axis=1, keepdims=True)
