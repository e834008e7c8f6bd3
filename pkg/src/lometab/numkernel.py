"""Dense float64 matrix helpers, seeded RNG and initializers.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major,
C-contiguous).  The helpers below add the shape checks and error messages the
rest of the package relies on.

Products are delegated to numpy's ``matmul``.  For a fixed machine and thread
count the BLAS accumulation order is fixed, so repeated runs give bitwise
identical results; it is *not* guaranteed to match across BLAS builds.
"""

from __future__ import annotations

import math

import numpy as np

DEFAULT_RANK_TOL = 1e-9


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class SingularEntryError(ZeroDivisionError):
    """An element-wise denominator contains an exact zero."""

    def __init__(self, row: int, col: int):
        super().__init__(f"zero denominator entry at (row={row}, col={col})")
        self.row = row
        self.col = col


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return np.ascontiguousarray(m)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    return a * b


def elementwise_divide(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_divide: {a.shape} vs {b.shape}")
    zeros = np.argwhere(b == 0.0)
    if len(zeros):
        idx = zeros[0]
        raise SingularEntryError(int(idx[0]), int(idx[1]) if len(idx) > 1 else 0)
    return a / b


def sample_gaussian(rng: np.random.Generator, rows: int, cols: int, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros((rows, cols))
    return rng.normal(0.0, sigma, size=(rows, cols))


def kaiming_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / fan_in), fan_in = cols."""
    if cols < 1:
        raise ShapeError("kaiming_uniform needs fan_in >= 1")
    bound = math.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("stable_softmax: non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def singular_values(m) -> np.ndarray:
    m = as_matrix(m)
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def numerical_rank(m, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values greater than ``tol * sigma_max``.

    A matrix whose largest singular value is exactly zero has rank 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))
