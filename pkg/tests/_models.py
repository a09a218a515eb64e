"""Small hand-built models shared by the tests."""

from __future__ import annotations

import numpy as np

from mfcrs.model import ControlBox, ModelSpec, jump_law


def const(c):
    return lambda t, x, m, v, i: np.full((x.shape[0], 1), float(c))


def spec(b=0.0, sigma=0.0, lam=0.0, f=0.0, h=None, jump=("point_mass", {"a": 0.0}), T=1.0, n_regimes=1, C0=None, **kw):
    """Model whose coefficients are constants or ``(t, x, m, v, i)`` callables."""
    wrap = lambda c: c if callable(c) else const(c)  # noqa: E731
    if h is None:
        h = lambda t, x, m, i: np.zeros((x.shape[0], 1))  # noqa: E731
    return ModelSpec(
        b=wrap(b),
        sigma=wrap(sigma),
        lam=wrap(lam),
        f=wrap(f),
        h=h,
        A=kw.pop("A", ControlBox.interval(-1.0, 1.0)),
        jump=jump_law(jump[0], jump[1], D=6),
        T=T,
        n_regimes=n_regimes,
        C0=C0 if C0 is not None else 10.0,
        **kw,
    )
