"""Operator expressions over single-freedom primary kernels.

Operators are immutable expression trees.  Leaves are primary operators (a
kernel acting along one freedom's axis, with an optional hermitian-conjugate
flag); interior nodes are sums, ordered products (applied right to left),
scalar multiples, time-function multiples and small integer powers.  Nothing
is simplified automatically -- the tree a user builds is the tree that runs,
except that adjacent scalar factors are folded into one multiply during
evaluation.

Application is matrix-free: a primary reshapes the flat amplitude buffer to
expose its freedom's axis and mutates the slice in place, so every other
freedom rides along.  Field kernels are center-aware: with basis center
alpha, the physical ladder operator acts as the local one plus alpha.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache, reduce

import numpy as np

from .hilbert import ATOM, FIELD, SPIN, PhysicalType, StateVector, used_view

__all__ = [
    "Kind",
    "PrimaryOperator",
    "OperatorExpr",
    "Primary",
    "Sum",
    "Product",
    "ScalarMul",
    "TimeFnMul",
    "Power",
    "destroy",
    "create",
    "number",
    "position",
    "momentum",
    "sigma_plus",
    "sigma_minus",
    "sigma_z",
    "transition",
    "apply",
    "apply_in_place",
    "to_dense",
]

MAX_POWER = 32
DENSE_CAP = 4096

_SQRT2 = np.sqrt(2.0)


class Kind(Enum):
    DESTROY = "a"
    NUMBER = "n"
    POSITION = "x"
    MOMENTUM = "p"
    SIGMA_PLUS = "sp"
    SIGMA_MINUS = "sm"
    SIGMA_Z = "sz"
    TRANSITION = "tr"


_PTYPE_OF = {
    Kind.DESTROY: FIELD,
    Kind.NUMBER: FIELD,
    Kind.POSITION: FIELD,
    Kind.MOMENTUM: FIELD,
    Kind.SIGMA_PLUS: SPIN,
    Kind.SIGMA_MINUS: SPIN,
    Kind.SIGMA_Z: SPIN,
    Kind.TRANSITION: ATOM,
}


@lru_cache(maxsize=None)
def _sqrt_ladder(n: int) -> np.ndarray:
    r = np.sqrt(np.arange(n, dtype=np.float64))
    r.flags.writeable = False
    return r


def _ax(nd: int, axis: int, sl) -> tuple:
    ix = [slice(None)] * nd
    ix[axis] = sl
    return tuple(ix)


def _bshape(vec: np.ndarray, nd: int, axis: int) -> np.ndarray:
    shape = [1] * nd
    shape[axis] = vec.shape[0]
    return vec.reshape(shape)


# ---------------------------------------------------------------------------
# Kernels.  Each mutates `v` (a view of shape (B, u_1, ..., u_M)) along
# `axis`, implementing the physical operator for basis center c.


def _k_destroy(v, axis, hc, c):
    n = v.shape[axis]
    r = _bshape(_sqrt_ladder(n)[1:], v.ndim, axis)
    if not hc:
        base = v * c if c else None
        v[_ax(v.ndim, axis, slice(0, n - 1))] = r * v[_ax(v.ndim, axis, slice(1, n))]
        v[_ax(v.ndim, axis, slice(n - 1, n))] = 0
    else:
        base = v * np.conj(c) if c else None
        v[_ax(v.ndim, axis, slice(1, n))] = r * v[_ax(v.ndim, axis, slice(0, n - 1))]
        v[_ax(v.ndim, axis, slice(0, 1))] = 0
    if base is not None:
        v += base


def _k_number(v, axis, hc, c):
    n = v.shape[axis]
    k = np.arange(n, dtype=np.float64)
    if not c:
        v *= _bshape(k, v.ndim, axis)
        return
    r = _bshape(_sqrt_ladder(n)[1:], v.ndim, axis)
    lo = _ax(v.ndim, axis, slice(0, n - 1))
    hi = _ax(v.ndim, axis, slice(1, n))
    out = v * _bshape(k + abs(c) ** 2, v.ndim, axis)
    out[hi] += c * r * v[lo]
    out[lo] += np.conj(c) * r * v[hi]
    np.copyto(v, out)


def _k_position(v, axis, hc, c):
    n = v.shape[axis]
    r = _bshape(_sqrt_ladder(n)[1:] / _SQRT2, v.ndim, axis)
    lo = _ax(v.ndim, axis, slice(0, n - 1))
    hi = _ax(v.ndim, axis, slice(1, n))
    out = v * (_SQRT2 * c.real) if c else np.zeros_like(v)
    out[lo] += r * v[hi]
    out[hi] += r * v[lo]
    np.copyto(v, out)


def _k_momentum(v, axis, hc, c):
    n = v.shape[axis]
    r = _bshape(_sqrt_ladder(n)[1:] * (1j / _SQRT2), v.ndim, axis)
    lo = _ax(v.ndim, axis, slice(0, n - 1))
    hi = _ax(v.ndim, axis, slice(1, n))
    out = v * (_SQRT2 * c.imag) if c else np.zeros_like(v)
    out[hi] += r * v[lo]
    out[lo] -= r * v[hi]
    np.copyto(v, out)


def _k_sigma_plus(v, axis, hc, c):
    up = _ax(v.ndim, axis, 1)
    dn = _ax(v.ndim, axis, 0)
    if not hc:
        v[up] = v[dn]
        v[dn] = 0
    else:
        v[dn] = v[up]
        v[up] = 0


def _k_sigma_minus(v, axis, hc, c):
    _k_sigma_plus(v, axis, not hc, c)


def _k_sigma_z(v, axis, hc, c):
    v[_ax(v.ndim, axis, 0)] *= -1


_KERNELS = {
    Kind.DESTROY: _k_destroy,
    Kind.NUMBER: _k_number,
    Kind.POSITION: _k_position,
    Kind.MOMENTUM: _k_momentum,
    Kind.SIGMA_PLUS: _k_sigma_plus,
    Kind.SIGMA_MINUS: _k_sigma_minus,
    Kind.SIGMA_Z: _k_sigma_z,
}


@dataclass(frozen=True)
class PrimaryOperator:
    """A single-freedom kernel: kind, target freedom, transition levels."""

    kind: Kind
    freedom: int
    levels: tuple = ()

    def __post_init__(self):
        if self.freedom < 0:
            raise ValueError("freedom index must be non-negative")
        if self.kind is Kind.TRANSITION:
            if len(self.levels) != 2:
                raise ValueError("transition needs two level indices")
            i, j = self.levels
            if i < 0 or j < 0:
                raise ValueError("transition levels must be non-negative")
            if i == j:
                raise ValueError("transition levels must differ")
        elif self.levels:
            raise ValueError(f"{self.kind.name} takes no level indices")

    @property
    def ptype(self) -> PhysicalType:
        return _PTYPE_OF[self.kind]

    def apply_to(self, amps2d: np.ndarray, freedoms, hc: bool, t: float):
        k = self.freedom
        if k >= len(freedoms):
            raise ValueError(f"freedom {k} out of range for {len(freedoms)}-freedom state")
        fr = freedoms[k]
        if fr.ptype is not self.ptype:
            raise TypeError(
                f"{self.kind.name} acts on {self.ptype.value} freedoms, "
                f"freedom {k} is {fr.ptype.value}"
            )
        v = used_view(amps2d, freedoms)
        axis = 1 + k
        if self.kind is Kind.TRANSITION:
            i, j = self.levels if not hc else self.levels[::-1]
            n = v.shape[axis]
            src = v[_ax(v.ndim, axis, j)].copy() if j < n else None
            v[...] = 0
            if src is not None and i < n:
                v[_ax(v.ndim, axis, i)] = src
        else:
            _KERNELS[self.kind](v, axis, hc, fr.center)

    def dense(self, dim: int, center: complex = 0j, hc: bool = False) -> np.ndarray:
        """Dense matrix of this kernel on a dim-level truncation."""
        c = complex(center)
        r = _sqrt_ladder(dim)[1:]
        if self.kind is Kind.DESTROY:
            m = np.diag(r, 1).astype(complex) + c * np.eye(dim)
        elif self.kind is Kind.NUMBER:
            m = np.diag(np.arange(dim) + abs(c) ** 2).astype(complex)
            m += c * np.diag(r, -1) + np.conj(c) * np.diag(r, 1)
        elif self.kind is Kind.POSITION:
            m = (np.diag(r, 1) + np.diag(r, -1)) / _SQRT2 + _SQRT2 * c.real * np.eye(dim)
            m = m.astype(complex)
        elif self.kind is Kind.MOMENTUM:
            m = 1j * (np.diag(r, -1) - np.diag(r, 1)) / _SQRT2
            m += _SQRT2 * c.imag * np.eye(dim)
        elif self.kind is Kind.SIGMA_PLUS:
            if dim != 2:
                raise ValueError("spin kernels need dimension 2")
            m = np.array([[0, 0], [1, 0]], dtype=complex)
        elif self.kind is Kind.SIGMA_MINUS:
            if dim != 2:
                raise ValueError("spin kernels need dimension 2")
            m = np.array([[0, 1], [0, 0]], dtype=complex)
        elif self.kind is Kind.SIGMA_Z:
            if dim != 2:
                raise ValueError("spin kernels need dimension 2")
            m = np.diag([-1.0 + 0j, 1.0 + 0j])
        else:
            i, j = self.levels
            m = np.zeros((dim, dim), dtype=complex)
            if i < dim and j < dim:
                m[i, j] = 1.0
        return m.conj().T if hc else m


# ---------------------------------------------------------------------------
# Expression trees


class OperatorExpr:
    """Base class; all nodes are immutable."""

    __slots__ = ()

    def hc(self) -> "OperatorExpr":
        raise NotImplementedError

    # construction-time concatenation of nested sums/products only; no other
    # algebraic rewriting happens here
    def __add__(self, other):
        if not isinstance(other, OperatorExpr):
            return NotImplemented
        left = self.children if isinstance(self, Sum) else (self,)
        right = other.children if isinstance(other, Sum) else (other,)
        return Sum(left + right)

    def __sub__(self, other):
        if not isinstance(other, OperatorExpr):
            return NotImplemented
        return self + ScalarMul(-1.0, other)

    def __neg__(self):
        return ScalarMul(-1.0, self)

    def __mul__(self, other):
        if isinstance(other, OperatorExpr):
            left = self.children if isinstance(self, Product) else (self,)
            right = other.children if isinstance(other, Product) else (other,)
            return Product(left + right)
        if isinstance(other, (int, float, complex, np.number)):
            return ScalarMul(other, self)
        return NotImplemented

    def __rmul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return ScalarMul(other, self)
        if callable(other):
            return TimeFnMul(other, self)
        return NotImplemented

    def __pow__(self, k):
        return Power(self, k)

    # hook for StateVector.__imul__
    def apply_to_state(self, psi: StateVector, t: float = 0.0):
        _apply_node(self, psi.as2d(), psi.freedoms, t)


@dataclass(frozen=True)
class Primary(OperatorExpr):
    op: PrimaryOperator
    conj: bool = False

    def hc(self):
        return Primary(self.op, not self.conj)


@dataclass(frozen=True)
class Sum(OperatorExpr):
    children: tuple

    def __post_init__(self):
        if len(self.children) < 1:
            raise ValueError("empty sum")

    def hc(self):
        return Sum(tuple(c.hc() for c in self.children))


@dataclass(frozen=True)
class Product(OperatorExpr):
    """Ordered product; children are applied right to left."""

    children: tuple

    def __post_init__(self):
        if len(self.children) < 1:
            raise ValueError("empty product")

    def hc(self):
        return Product(tuple(c.hc() for c in reversed(self.children)))


@dataclass(frozen=True)
class ScalarMul(OperatorExpr):
    scalar: complex
    child: OperatorExpr

    def __post_init__(self):
        object.__setattr__(self, "scalar", complex(self.scalar))

    def hc(self):
        return ScalarMul(np.conj(self.scalar), self.child.hc())


@dataclass(frozen=True)
class TimeFnMul(OperatorExpr):
    """Scalar coefficient that depends on the trajectory time."""

    fn: object
    child: OperatorExpr

    def hc(self):
        f = self.fn
        return TimeFnMul(lambda t: np.conj(f(t)), self.child.hc())


@dataclass(frozen=True)
class Power(OperatorExpr):
    child: OperatorExpr
    k: int

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or isinstance(self.k, bool):
            raise TypeError("power exponent must be an integer")
        if not 1 <= self.k <= MAX_POWER:
            raise ValueError(f"power exponent must be in 1..{MAX_POWER}")

    def hc(self):
        return Power(self.child.hc(), self.k)


# -- leaf builders ----------------------------------------------------------


def destroy(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.DESTROY, freedom))


def create(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.DESTROY, freedom), conj=True)


def number(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.NUMBER, freedom))


def position(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.POSITION, freedom))


def momentum(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.MOMENTUM, freedom))


def sigma_plus(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.SIGMA_PLUS, freedom))


def sigma_minus(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.SIGMA_MINUS, freedom))


def sigma_z(freedom: int) -> Primary:
    return Primary(PrimaryOperator(Kind.SIGMA_Z, freedom))


def transition(freedom: int, i: int, j: int) -> Primary:
    return Primary(PrimaryOperator(Kind.TRANSITION, freedom, (int(i), int(j))))


# ---------------------------------------------------------------------------
# Evaluation


def _apply_node(node, amps2d, freedoms, t):
    """Evaluate `node` on the (B, N) buffer in place."""
    z = None
    while True:
        if isinstance(node, ScalarMul):
            z = node.scalar if z is None else z * node.scalar
            node = node.child
        elif isinstance(node, TimeFnMul):
            w = complex(node.fn(t))
            z = w if z is None else z * w
            node = node.child
        else:
            break

    if isinstance(node, Primary):
        node.op.apply_to(amps2d, freedoms, node.conj, t)
    elif isinstance(node, Product):
        for child in reversed(node.children):
            _apply_node(child, amps2d, freedoms, t)
    elif isinstance(node, Power):
        for _ in range(node.k):
            _apply_node(node.child, amps2d, freedoms, t)
    elif isinstance(node, Sum):
        cs = node.children
        if len(cs) == 1:
            _apply_node(cs[0], amps2d, freedoms, t)
        else:
            # one pristine copy of the input; the final term reuses it as its
            # own workspace, intermediate terms share one scratch buffer
            original = amps2d.copy()
            _apply_node(cs[0], amps2d, freedoms, t)
            if len(cs) > 2:
                scratch = np.empty_like(amps2d)
                for child in cs[1:-1]:
                    np.copyto(scratch, original)
                    _apply_node(child, scratch, freedoms, t)
                    amps2d += scratch
            _apply_node(cs[-1], original, freedoms, t)
            amps2d += original
    else:
        raise TypeError(f"not an operator expression: {node!r}")

    if z is not None and z != 1:
        amps2d *= z


def apply(expr: OperatorExpr, psi: StateVector, t: float = 0.0) -> StateVector:
    """Return expr|psi> as a new state."""
    out = psi.copy()
    _apply_node(expr, out.as2d(), out.freedoms, t)
    return out


def apply_in_place(expr: OperatorExpr, psi: StateVector, t: float = 0.0) -> StateVector:
    """Overwrite psi with expr|psi>; a bare primary touches no temporaries."""
    _apply_node(expr, psi.as2d(), psi.freedoms, t)
    return psi


# ---------------------------------------------------------------------------
# Dense route, built from matrices rather than kernels so the two can be
# checked against each other.


def _embed(m: np.ndarray, dims, k: int) -> np.ndarray:
    mats = [np.eye(d, dtype=complex) for d in dims]
    mats[k] = m
    return reduce(np.kron, mats)


def _dense_node(node, dims, centers, t):
    if isinstance(node, Primary):
        k = node.op.freedom
        if k >= len(dims):
            raise ValueError(f"freedom {k} out of range")
        m = node.op.dense(dims[k], centers[k], node.conj)
        return _embed(m, dims, k)
    if isinstance(node, Sum):
        return sum(_dense_node(c, dims, centers, t) for c in node.children)
    if isinstance(node, Product):
        return reduce(np.matmul, (_dense_node(c, dims, centers, t) for c in node.children))
    if isinstance(node, ScalarMul):
        return node.scalar * _dense_node(node.child, dims, centers, t)
    if isinstance(node, TimeFnMul):
        return complex(node.fn(t)) * _dense_node(node.child, dims, centers, t)
    if isinstance(node, Power):
        return np.linalg.matrix_power(_dense_node(node.child, dims, centers, t), node.k)
    raise TypeError(f"not an operator expression: {node!r}")


def to_dense(expr: OperatorExpr, dims, centers=None, t: float = 0.0, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense matrix m with m @ vec(psi) == apply(expr, psi) on the given dims."""
    dims = tuple(int(d) for d in dims)
    total = int(np.prod(dims))
    if total > cap:
        raise ValueError(f"dense dimension {total} exceeds cap {cap}")
    if centers is None:
        centers = (0j,) * len(dims)
    centers = tuple(complex(c) for c in centers)
    if len(centers) != len(dims):
        raise ValueError("one center per freedom required")
    return _dense_node(expr, dims, centers, t)
