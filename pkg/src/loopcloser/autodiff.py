"""Forward-mode automatic differentiation with vector-valued dual numbers.

A :class:`Dual` carries a value and the partial derivatives of that value with
respect to a fixed set of seed directions (seven for a Sim3 tangent). Values
may be scalars or arrays; in the array case every element is an independent
dual number, which lets one pass evaluate a whole batch of edges.

The free functions (``sin``, ``sqrt``, ``where`` ...) accept plain floats,
numpy arrays or duals, so the same kernel code runs on all three.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Dual",
    "seed",
    "value",
    "sin",
    "cos",
    "exp",
    "expm1",
    "log",
    "sqrt",
    "atan2",
    "where",
]


def _col(x):
    return np.asarray(x, dtype=float)[..., None]


class Dual:
    """Dual number ``val + der . eps`` with ``der`` of shape ``val.shape + (k,)``."""

    __slots__ = ("val", "der")
    __array_priority__ = 100  # make ndarray <op> Dual dispatch to our reflected ops

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @property
    def nder(self) -> int:
        return self.der.shape[-1]

    def __repr__(self) -> str:
        return f"Dual({self.val!r}, {self.der!r})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val + o.val, self.der + o.der)
        return Dual(self.val + o, self.der + 0.0 * _col(o))

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val - o.val, self.der - o.der)
        return Dual(self.val - o, self.der + 0.0 * _col(o))

    def __rsub__(self, o):
        return Dual(o - self.val, -self.der + 0.0 * _col(o))

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val * o.val, self.der * _col(o.val) + o.der * _col(self.val))
        return Dual(self.val * o, self.der * _col(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            q = self.val / o.val
            return Dual(q, (self.der - o.der * _col(q)) / _col(o.val))
        return Dual(self.val / o, self.der / _col(o))

    def __rtruediv__(self, o):
        q = o / self.val
        return Dual(q, -self.der * _col(q / self.val))

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("Dual only supports integer powers; use exp/log")
        if n == 0:
            return Dual(np.ones_like(self.val), np.zeros_like(self.der))
        return Dual(self.val**n, self.der * _col(n * self.val ** (n - 1)))

    # elementary functions -----------------------------------------------------
    def sin(self):
        return Dual(np.sin(self.val), self.der * _col(np.cos(self.val)))

    def cos(self):
        return Dual(np.cos(self.val), -self.der * _col(np.sin(self.val)))

    def exp(self):
        e = np.exp(self.val)
        return Dual(e, self.der * _col(e))

    def expm1(self):
        return Dual(np.expm1(self.val), self.der * _col(np.exp(self.val)))

    def log(self):
        return Dual(np.log(self.val), self.der / _col(self.val))

    def sqrt(self):
        r = np.sqrt(self.val)
        return Dual(r, self.der / _col(2.0 * r))


def seed(values, k: int | None = None) -> list[Dual]:
    """Lift ``values[i]`` to a dual with unit derivative in direction ``i``.

    Each entry may be a scalar or an array (batched evaluation); all entries must
    share one shape.
    """
    vals = [np.asarray(v, dtype=float) for v in values]
    k = len(vals) if k is None else k
    out = []
    for i, v in enumerate(vals):
        d = np.zeros(v.shape + (k,))
        d[..., i] = 1.0
        out.append(Dual(v, d))
    return out


def value(x):
    return x.val if isinstance(x, Dual) else x


def sin(x):
    return x.sin() if isinstance(x, Dual) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Dual) else np.cos(x)


def exp(x):
    return x.exp() if isinstance(x, Dual) else np.exp(x)


def expm1(x):
    return x.expm1() if isinstance(x, Dual) else np.expm1(x)


def log(x):
    return x.log() if isinstance(x, Dual) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Dual) else np.sqrt(x)


def atan2(y, x):
    if not isinstance(y, Dual) and not isinstance(x, Dual):
        return np.arctan2(y, x)
    yv, xv = value(y), value(x)
    r2 = _col(xv * xv + yv * yv)
    der = 0.0
    if isinstance(y, Dual):
        der = y.der * _col(xv)
    if isinstance(x, Dual):
        der = der - x.der * _col(yv)
    return Dual(np.arctan2(yv, xv), der / r2)


def where(cond, a, b):
    """Elementwise select. ``cond`` is evaluated on values, never on derivatives."""
    cond = np.asarray(cond)
    if cond.ndim == 0 and not isinstance(a, Dual) and not isinstance(b, Dual):
        return a if bool(cond) else b
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(cond, a, b)
    ad = a.der if isinstance(a, Dual) else 0.0
    bd = b.der if isinstance(b, Dual) else 0.0
    return Dual(np.where(cond, value(a), value(b)), np.where(cond[..., None], ad, bd))
