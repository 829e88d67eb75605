"""Vectorised forward-mode automatic differentiation.

A :class:`Dual` carries an array value together with ``k`` directional
derivatives stacked along a trailing axis, so a single evaluation of a
function yields its Jacobian-vector products along ``k`` directions at once.
Model code that should be differentiable writes its math through the helpers
in this module (``sin``, ``cos``, ``sqrt``, ``array``) which dispatch to
numpy for plain arrays.

>>> x = seed(np.array([1.0, 2.0]), np.eye(2))
>>> y = x[0] * x[1]
>>> y.val, y.der
(array(2.), array([2., 1.]))
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "der")
    # let numpy defer to our reflected operators instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def nderiv(self):
        return self.der.shape[-1]

    @property
    def T(self):
        if self.val.ndim < 2:
            return self
        return Dual(self.val.T, np.swapaxes(self.der, 0, 1))

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"

    def __getitem__(self, idx):
        return Dual(self.val[idx], self.der[idx])

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            val = self.val + other.val
            der = self.der + other.der
            return Dual(val, np.broadcast_to(der, val.shape + der.shape[-1:]))
        val = self.val + other
        return Dual(val, np.broadcast_to(self.der, val.shape + self.der.shape[-1:]))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.der * other.val[..., None] + self.val[..., None] * other.der,
            )
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.der * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            der = (self.der - val[..., None] * other.der) * inv[..., None]
            return Dual(val, der)
        inv = 1.0 / np.asarray(other, dtype=float)
        return Dual(self.val * inv, self.der * inv[..., None])

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        val = other / self.val
        return Dual(val, -(val / self.val)[..., None] * self.der)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("Dual exponents are not supported")
        val = self.val**p
        return Dual(val, (p * self.val ** (p - 1))[..., None] * self.der)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None):
        if axis is None:
            axes = tuple(range(self.val.ndim))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % self.val.ndim for a in axes)
        return Dual(self.val.sum(axis=axes), self.der.sum(axis=axes))


def _der_front(d: Dual):
    return np.moveaxis(d.der, -1, 0)


def matmul(a, b):
    """``a @ b`` where either operand may be a :class:`Dual`."""
    a_dual = isinstance(a, Dual)
    b_dual = isinstance(b, Dual)
    if not (a_dual or b_dual):
        return np.asarray(a) @ np.asarray(b)
    a_val = a.val if a_dual else np.asarray(a, dtype=float)
    b_val = b.val if b_dual else np.asarray(b, dtype=float)
    val = a_val @ b_val
    der = 0.0
    if a_dual:
        der = der + np.moveaxis(_der_front(a) @ b_val, 0, -1)
    if b_dual:
        if b_val.ndim == 1:
            der = der + a_val @ b.der
        else:
            der = der + np.moveaxis(a_val @ _der_front(b), 0, -1)
    return Dual(val, der)


def seed(x, directions):
    """Lift ``x`` (shape ``S``) to a Dual with the given tangent directions.

    ``directions`` has shape ``S + (k,)``; column ``j`` is the j-th direction.
    """
    x = np.asarray(x, dtype=float)
    directions = np.asarray(directions, dtype=float)
    if directions.ndim == x.ndim:
        directions = directions[..., None]
    if directions.shape[:-1] != x.shape:
        raise ValueError(f"direction shape {directions.shape} does not match value shape {x.shape}")
    return Dual(x, directions)


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), np.cos(x.val)[..., None] * x.der)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -np.sin(x.val)[..., None] * x.der)
    return np.cos(x)


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.val)
        return Dual(e, e[..., None] * x.der)
    return np.exp(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = np.sqrt(x.val)
        return Dual(s, (0.5 / s)[..., None] * x.der)
    return np.sqrt(x)


def dot(a, b):
    """Inner product of two vectors (either may be Dual)."""
    return matmul(a, b)


def outer(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a2 = a[:, None] if isinstance(a, Dual) else np.asarray(a, dtype=float)[:, None]
        b2 = b[None, :] if isinstance(b, Dual) else np.asarray(b, dtype=float)[None, :]
        return a2 * b2 if isinstance(a2, Dual) else b2 * a2
    return np.outer(a, b)


def _find_k(obj):
    if isinstance(obj, Dual):
        return obj.nderiv
    if isinstance(obj, (list, tuple)):
        for item in obj:
            k = _find_k(item)
            if k is not None:
                return k
    return None


def _build(obj, k):
    if isinstance(obj, Dual):
        return obj.val, obj.der
    if isinstance(obj, (list, tuple)):
        parts = [_build(item, k) for item in obj]
        return np.stack([p[0] for p in parts]), np.stack([p[1] for p in parts])
    v = np.asarray(obj, dtype=float)
    return v, np.zeros(v.shape + (k,))


def array(obj):
    """Build an array from a (nested) list that may contain Dual entries.

    Returns a plain ndarray when no entry is a Dual.
    """
    k = _find_k(obj)
    if k is None:
        return np.asarray(obj, dtype=float)
    val, der = _build(obj, k)
    return Dual(val, der)


def zeros_like(x):
    if isinstance(x, Dual):
        return Dual(np.zeros_like(x.val), np.zeros_like(x.der))
    return np.zeros_like(x, dtype=float)
