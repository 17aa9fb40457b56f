"""Small dense symmetric positive definite matrices.

Every volatility scenario, its square root and inverse square root, and the
Loewner comparisons between scenarios go through :class:`SpdMatrix`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SYM_TOL = 1e-12
LOEWNER_TOL = 1e-12


class SpdError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """Symmetric positive definite ``d x d`` matrix (variance per unit time)."""

    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.entries, dtype=float)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        elif m.ndim == 1 and m.size == 1:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SpdError(f"expected a square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise SpdError("matrix has non-finite entries")
        if np.max(np.abs(m - m.T)) > SYM_TOL:
            raise SpdError("matrix is not symmetric within 1e-12")
        m = 0.5 * (m + m.T)
        w = np.linalg.eigvalsh(m)
        if w[0] <= 0.0:
            raise SpdError(f"matrix is not positive definite (min eigenvalue {w[0]:.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @classmethod
    def identity(cls, d: int) -> "SpdMatrix":
        return cls(np.eye(d))

    @classmethod
    def diag(cls, *values) -> "SpdMatrix":
        return cls(np.diag(np.asarray(values, dtype=float).ravel()))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def _eig(self):
        w, v = np.linalg.eigh(self.entries)
        return w, v

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eig[0]

    def _spectral(self, fn) -> np.ndarray:
        w, v = self._eig
        out = (v * fn(w)) @ v.T
        return 0.5 * (out + out.T)

    @cached_property
    def sqrt_array(self) -> np.ndarray:
        return self._spectral(np.sqrt)

    @cached_property
    def inv_sqrt_array(self) -> np.ndarray:
        return self._spectral(lambda w: 1.0 / np.sqrt(w))

    @cached_property
    def inverse_array(self) -> np.ndarray:
        return self._spectral(lambda w: 1.0 / w)

    def sqrt(self) -> "SpdMatrix":
        return SpdMatrix(self.sqrt_array)

    def inv_sqrt(self) -> "SpdMatrix":
        return SpdMatrix(self.inv_sqrt_array)

    def scaled(self, factor: float) -> "SpdMatrix":
        return SpdMatrix(self.entries * float(factor))

    def is_diagonal(self) -> bool:
        return bool(np.all(self.entries == np.diag(np.diag(self.entries))))

    def trace_inverse(self) -> float:
        return float(np.sum(1.0 / self.eigenvalues))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, SpdMatrix):
            return NotImplemented
        return self.entries.shape == other.entries.shape and bool(
            np.array_equal(self.entries, other.entries)
        )

    def __hash__(self):
        return hash(self.entries.tobytes())

    def __repr__(self):
        if self.dim == 1:
            return f"SpdMatrix({self.entries[0, 0]:.6g})"
        return f"SpdMatrix({self.entries.tolist()})"


def as_spd(a) -> SpdMatrix:
    return a if isinstance(a, SpdMatrix) else SpdMatrix(a)


def sqrt(a) -> SpdMatrix:
    """Unique SPD square root, via the symmetric eigendecomposition."""
    return as_spd(a).sqrt()


def inv_sqrt(a) -> SpdMatrix:
    return as_spd(a).inv_sqrt()


def loewner_leq(a, b, tol: float = LOEWNER_TOL) -> bool:
    """True iff ``b - a`` is positive semidefinite (smallest eigenvalue >= -tol)."""
    a, b = as_spd(a), as_spd(b)
    if a.dim != b.dim:
        raise SpdError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = b.entries - a.entries
    return bool(np.linalg.eigvalsh(0.5 * (diff + diff.T))[0] >= -tol)
