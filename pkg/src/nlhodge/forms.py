"""Differential forms sampled on uniform tensor-product grids.

A k-form on an n-dimensional box is stored as ``C(n, k)`` scalar arrays, one
per strictly increasing multi-index, in lexicographic order. Coefficients
are taken with respect to the orthonormal coframe ``dx^I`` of the Euclidean
metric with the standard orientation ``dx^1 ^ ... ^ dx^n``.

Multi-indices in the public API are 1-based tuples, so ``(1, 2)`` denotes
``dx^1 ^ dx^2``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import comb

import numpy as np

from .errors import PreconditionError

__all__ = [
    "Grid",
    "DiscreteForm",
    "basis",
    "permutation_sign",
    "wedge",
    "hodge_star",
    "exterior_d",
    "codifferential",
    "qnorm",
    "l2_inner",
    "l2_norm",
    "max_norm",
]


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on the box ``prod_i [lo_i, hi_i]``.

    Array axis ``i`` corresponds to the coordinate ``x_{i+1}``.
    """

    bounds: tuple
    res: tuple

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        res = tuple(int(r) for r in self.res)
        if len(bounds) != len(res):
            raise PreconditionError("bounds and res must have the same length")
        if not 2 <= len(res) <= 4:
            raise PreconditionError(f"dimension must be 2..4, got {len(res)}")
        if any(r < 3 for r in res):
            raise PreconditionError(f"every axis needs at least 3 nodes, got {res}")
        if any(not hi > lo for lo, hi in bounds):
            raise PreconditionError(f"empty interval in bounds {bounds}")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "res", res)

    @classmethod
    def box(cls, n, lo=0.0, hi=1.0, res=33):
        return cls(((lo, hi),) * n, (res,) * n)

    @property
    def n(self):
        return len(self.res)

    @property
    def shape(self):
        return self.res

    @property
    def size(self):
        return int(np.prod(self.res))

    @cached_property
    def h(self):
        return tuple((hi - lo) / (r - 1) for (lo, hi), r in zip(self.bounds, self.res))

    @cached_property
    def axes(self):
        return tuple(np.linspace(lo, hi, r) for (lo, hi), r in zip(self.bounds, self.res))

    @cached_property
    def coords(self):
        """Tuple of n coordinate arrays, each shaped like the grid."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def weights(self):
        """Trapezoidal quadrature weights, shaped like the grid."""
        w = np.ones(self.shape)
        for i, (r, h) in enumerate(zip(self.res, self.h)):
            wi = np.full(r, h)
            wi[0] = wi[-1] = h / 2
            shape = [1] * self.n
            shape[i] = r
            w = w * wi.reshape(shape)
        return w

    def interior(self, depth=1):
        """Boolean mask of nodes at least ``depth`` nodes away from the boundary."""
        mask = np.zeros(self.shape, dtype=bool)
        mask[tuple(slice(depth, r - depth) for r in self.res)] = True
        return mask

    def boundary(self):
        return ~self.interior(1)


@lru_cache(maxsize=None)
def basis(n, k):
    """Strictly increasing 0-based k-tuples from range(n), lexicographic."""
    if not 0 <= k <= n:
        raise PreconditionError(f"degree {k} out of range for n={n}")
    return tuple(itertools.combinations(range(n), k))


@lru_cache(maxsize=None)
def _position(n, k):
    return {idx: p for p, idx in enumerate(basis(n, k))}


def permutation_sign(seq):
    """Parity (+1/-1) of the permutation sorting ``seq``; 0 if entries repeat."""
    seq = list(seq)
    if len(set(seq)) != len(seq):
        return 0
    inversions = sum(1 for i in range(len(seq)) for j in range(i + 1, len(seq)) if seq[i] > seq[j])
    return -1 if inversions % 2 else 1


class DiscreteForm:
    """A k-form with one coefficient array per increasing multi-index."""

    __array_ufunc__ = None  # ndarray * form defers to __rmul__

    def __init__(self, grid, k, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        if not 0 <= k <= grid.n:
            raise PreconditionError(f"degree {k} out of range for n={grid.n}")
        expected = (comb(grid.n, k),) + grid.shape
        if coeffs.shape != expected:
            raise PreconditionError(f"coefficient array has shape {coeffs.shape}, expected {expected}")
        self.grid = grid
        self.k = int(k)
        self.coeffs = coeffs

    # -- construction -------------------------------------------------------
    @classmethod
    def zeros(cls, grid, k):
        return cls(grid, k, np.zeros((comb(grid.n, k),) + grid.shape))

    @classmethod
    def from_components(cls, grid, k, components):
        """Build from ``{(i1, .., ik): values}`` with 1-based indices.

        Values may be scalars or arrays shaped like the grid. Unsorted index
        tuples are accepted and sign-corrected.
        """
        form = cls.zeros(grid, k)
        pos = _position(grid.n, k)
        for idx, val in components.items():
            idx = tuple(idx) if k else ()
            if len(idx) != k:
                raise PreconditionError(f"index {idx} does not have degree {k}")
            zero_based = tuple(i - 1 for i in idx)
            sign = permutation_sign(zero_based)
            if sign == 0:
                continue
            key = tuple(sorted(zero_based))
            if key not in pos:
                raise PreconditionError(f"index {idx} out of range for n={grid.n}")
            form.coeffs[pos[key]] += sign * np.broadcast_to(np.asarray(val, dtype=float), grid.shape)
        return form

    @classmethod
    def scalar(cls, grid, values):
        return cls(grid, 0, np.broadcast_to(np.asarray(values, dtype=float), grid.shape)[None].copy())

    # -- access ---------------------------------------------------------------
    @property
    def indices(self):
        """1-based multi-indices labelling ``coeffs``."""
        return tuple(tuple(i + 1 for i in idx) for idx in basis(self.grid.n, self.k))

    def __getitem__(self, idx):
        idx = tuple(idx) if not isinstance(idx, int) else (idx,)
        key = tuple(i - 1 for i in idx)
        return self.coeffs[_position(self.grid.n, self.k)[key]]

    def __repr__(self):
        return f"DiscreteForm(k={self.k}, n={self.grid.n}, res={self.grid.res})"

    # -- arithmetic -------------------------------------------------------------
    def _check_same(self, other):
        if not isinstance(other, DiscreteForm):
            return NotImplemented
        if other.grid != self.grid:
            raise PreconditionError("forms live on different grids")
        if other.k != self.k:
            raise PreconditionError(f"degree mismatch: {self.k} vs {other.k}")
        return other

    def __add__(self, other):
        if self._check_same(other) is NotImplemented:
            return NotImplemented
        return DiscreteForm(self.grid, self.k, self.coeffs + other.coeffs)

    def __sub__(self, other):
        if self._check_same(other) is NotImplemented:
            return NotImplemented
        return DiscreteForm(self.grid, self.k, self.coeffs - other.coeffs)

    def __neg__(self):
        return DiscreteForm(self.grid, self.k, -self.coeffs)

    def __mul__(self, factor):
        """Multiply by a scalar or by a field shaped like the grid."""
        if isinstance(factor, DiscreteForm):
            return NotImplemented
        factor = np.asarray(factor, dtype=float)
        return DiscreteForm(self.grid, self.k, self.coeffs * factor)

    __rmul__ = __mul__

    def __truediv__(self, factor):
        factor = np.asarray(factor, dtype=float)
        return DiscreteForm(self.grid, self.k, self.coeffs / factor)

    def copy(self):
        return DiscreteForm(self.grid, self.k, self.coeffs.copy())


def _check_grid(a, b):
    if a.grid != b.grid:
        raise PreconditionError("forms live on different grids")


def wedge(a, b):
    """Pointwise exterior product ``a ^ b``."""
    _check_grid(a, b)
    n = a.grid.n
    k, l = a.k, b.k
    if k + l > n:
        raise PreconditionError(f"wedge of degrees {k} and {l} exceeds n={n}")
    out = DiscreteForm.zeros(a.grid, k + l)
    pos = _position(n, k + l)
    for p, I in enumerate(basis(n, k)):
        for q, J in enumerate(basis(n, l)):
            sign = permutation_sign(I + J)
            if sign:
                out.coeffs[pos[tuple(sorted(I + J))]] += sign * a.coeffs[p] * b.coeffs[q]
    return out


def hodge_star(a):
    """Euclidean Hodge star: ``*dx^I = sign(I, I^c) dx^{I^c}``."""
    n = a.grid.n
    out = DiscreteForm.zeros(a.grid, n - a.k)
    pos = _position(n, n - a.k)
    for p, I in enumerate(basis(n, a.k)):
        Ic = tuple(i for i in range(n) if i not in I)
        out.coeffs[pos[Ic]] = permutation_sign(I + Ic) * a.coeffs[p]
    return out


def _partial(arr, grid, axis):
    return np.gradient(arr, grid.h[axis], axis=axis, edge_order=2)


def exterior_d(a):
    """Exterior derivative by second-order finite differences.

    Central differences at interior nodes and second-order one-sided
    differences at boundary nodes, so ``d(d a)`` vanishes to roundoff.
    """
    n = a.grid.n
    if a.k >= n:
        raise PreconditionError(f"exterior derivative of an {a.k}-form in n={n}")
    out = DiscreteForm.zeros(a.grid, a.k + 1)
    pos = _position(n, a.k + 1)
    for p, I in enumerate(basis(n, a.k)):
        coeff = a.coeffs[p]
        if not np.any(coeff):
            continue
        for j in range(n):
            if j in I:
                continue
            out.coeffs[pos[tuple(sorted((j,) + I))]] += permutation_sign((j,) + I) * _partial(coeff, a.grid, j)
    return out


def codifferential(a):
    """``delta = (-1)^(n(k+1)+1) * d *`` on k-forms (Euclidean signature)."""
    n = a.grid.n
    if a.k == 0:
        raise PreconditionError("codifferential of a 0-form")
    sign = -1 if (n * (a.k + 1) + 1) % 2 else 1
    return sign * hodge_star(exterior_d(hodge_star(a)))


def qnorm(a):
    """Pointwise squared norm ``|a|^2`` as an array shaped like the grid."""
    return np.einsum("i...,i...->...", a.coeffs, a.coeffs)


def l2_inner(a, b):
    """Trapezoidal approximation of the L2 inner product over the box."""
    _check_grid(a, b)
    if a.k != b.k:
        raise PreconditionError(f"degree mismatch: {a.k} vs {b.k}")
    pointwise = np.einsum("i...,i...->...", a.coeffs, b.coeffs)
    return float(np.sum(a.grid.weights * pointwise))


def l2_norm(a, mask=None):
    q = qnorm(a)
    w = a.grid.weights
    if mask is not None:
        q, w = q[mask], w[mask]
    return float(np.sqrt(np.sum(w * q)))


def max_norm(a, mask=None):
    q = qnorm(a)
    if mask is not None:
        q = q[mask]
    return float(np.sqrt(q.max())) if q.size else 0.0
