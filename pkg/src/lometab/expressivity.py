"""Constructive checks of the BatchEnsemble -> low-rank multiplicative inclusion.

* :func:`rank_factorize_padded` writes a rank-``rho`` matrix as ``A B^T`` with
  ``r >= rho`` columns, zero-padding the unused ones.
* :func:`embed_be_into_lome` maps every rank-1 mask ``s r^T`` to adapters with
  ``A B^T = s r^T - 1`` (rank at most 2, so any ``r >= 2`` works).
* :func:`ratio_rank_witness` certifies that a pair of effective weights is not
  reachable by any rank-1 mask pair: their element-wise ratio has a non-zero
  2x2 minor.
* :func:`build_counterexample` produces such a pair from a rank-2 residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import EnsembleLinearParams, Kind
from .numkernel import DEFAULT_RANK_TOL, elementwise_divide, make_rng, numerical_rank

MINOR_TOL = 1e-9


class InfeasibleRankError(ValueError):
    pass


@dataclass
class BeParams:
    W: np.ndarray
    s: np.ndarray  # (K, m)
    r: np.ndarray  # (K, n)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.s = np.atleast_2d(np.asarray(self.s, dtype=np.float64))
        self.r = np.atleast_2d(np.asarray(self.r, dtype=np.float64))
        m, n = self.W.shape
        if self.s.shape[1] != m or self.r.shape[1] != n or len(self.s) != len(self.r):
            raise ValueError(f"mask shapes s={self.s.shape} r={self.r.shape} do not fit W {self.W.shape}")
        if np.any(self.W == 0) or np.any(self.s == 0) or np.any(self.r == 0):
            raise ValueError("BatchEnsemble parameters must have all entries non-zero")

    @property
    def K(self) -> int:
        return len(self.s)

    def effective_weights(self) -> np.ndarray:
        return self.W * self.s[:, :, None] * self.r[:, None, :]

    def as_layer(self) -> EnsembleLinearParams:
        return EnsembleLinearParams(Kind.RANK1, {"W": self.W, "bias": np.zeros(len(self.W)), "s": self.s, "r": self.r})


@dataclass
class LomeParams:
    W: np.ndarray
    A: np.ndarray  # (K, m, r)
    B: np.ndarray  # (K, n, r)

    @property
    def K(self) -> int:
        return len(self.A)

    @property
    def rank(self) -> int:
        return self.A.shape[2]

    def effective_weights(self) -> np.ndarray:
        return self.W * (1.0 + np.matmul(self.A, self.B.transpose(0, 2, 1)))

    def as_layer(self) -> EnsembleLinearParams:
        return EnsembleLinearParams(
            Kind.MULTIPLICATIVE, {"W": self.W, "bias": np.zeros(len(self.W)), "A": self.A, "B": self.B}
        )


def rank_factorize_padded(M, r: int, tol: float = DEFAULT_RANK_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Return ``A (m x r)``, ``B (n x r)`` with ``A B^T = M``.

    Built by pivoted rank-one deflation: take the largest remaining entry
    ``R[i, j]`` as pivot, peel off ``R[:, j] R[i, :] / R[i, j]``, repeat until
    the residual vanishes.  Each step removes exactly one rank, so at most
    ``rank(M)`` columns are used; the rest stay zero.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("M must be a matrix")
    if r < 1:
        raise ValueError("target rank must be >= 1")
    rho = numerical_rank(M, tol)
    if rho > r:
        raise InfeasibleRankError(f"matrix has numerical rank {rho} > target rank {r}")
    m, n = M.shape
    A = np.zeros((m, r))
    B = np.zeros((n, r))
    R = M.copy()
    scale = np.abs(M).max() if M.size else 0.0
    for t in range(rho):
        i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        pivot = R[i, j]
        if abs(pivot) <= tol * scale:
            break
        A[:, t] = R[:, j]
        B[:, t] = R[i, :] / pivot
        R = R - np.outer(A[:, t], B[:, t])
    return A, B


def embed_be_into_lome(be: BeParams, r: int = 2) -> LomeParams:
    """Adapters with ``A_k B_k^T = s_k r_k^T - 1`` for every member, sharing ``W``."""
    if r < 2:
        raise ValueError("a rank-1 mask needs adapter rank >= 2 (s r^T - 1 has rank up to 2)")
    m, n = be.W.shape
    A = np.zeros((be.K, m, r))
    B = np.zeros((be.K, n, r))
    for k in range(be.K):
        A[k], B[k] = rank_factorize_padded(np.outer(be.s[k], be.r[k]) - 1.0, r)
    return LomeParams(be.W.copy(), A, B)


@dataclass
class RatioWitness:
    rank_lower_bound: int
    rows: tuple[int, int] | None = None
    cols: tuple[int, int] | None = None
    determinant: float | None = None


def ratio_rank_witness(w1, w2, tol: float = MINOR_TOL) -> RatioWitness:
    """Scan the 2x2 minors of ``Q = w1 / w2`` (element-wise).

    A minor ``Q[a,c] Q[b,d] - Q[a,d] Q[b,c]`` counts as vanishing when its
    magnitude is at most ``tol * max(|Q[a,c] Q[b,d]|, |Q[a,d] Q[b,c]|)``.  If
    all vanish the ratio has rank <= 1 and the bound is 1 (0 for Q = 0);
    otherwise the first non-vanishing minor in row-major order of
    ``(a, b, c, d)`` is returned with bound 2.
    """
    Q = elementwise_divide(w1, w2)
    m, n = Q.shape
    for a in range(m - 1):
        for b in range(a + 1, m):
            left = np.outer(Q[a], Q[b])  # left[c, d] = Q[a,c] Q[b,d]
            det = left - left.T  # det[c, d] = Q[a,c] Q[b,d] - Q[a,d] Q[b,c]
            bound = tol * np.maximum(np.abs(left), np.abs(left.T))
            hits = np.argwhere(np.triu(np.abs(det) > bound, k=1))
            if len(hits):
                c, d = (int(v) for v in hits[0])
                return RatioWitness(2, (a, b), (c, d), float(det[c, d]))
    return RatioWitness(0 if not np.any(Q) else 1)


def build_counterexample(m: int, n: int, r: int = 2, W=None) -> LomeParams:
    """Two members: member 1 carries the residual ``e1 f1^T + e2 f2^T``, member 2 none."""
    if m < 2 or n < 2:
        raise ValueError("counterexample needs m, n >= 2")
    if r < 2:
        raise ValueError("counterexample needs adapter rank >= 2")
    W = np.ones((m, n)) if W is None else np.asarray(W, dtype=np.float64)
    if W.shape != (m, n):
        raise ValueError(f"W has shape {W.shape}, expected {(m, n)}")
    if np.any(W == 0):
        raise ValueError("W must have all entries non-zero")
    M1 = np.zeros((m, n))
    M1[0, 0] = M1[1, 1] = 1.0
    A = np.zeros((2, m, r))
    B = np.zeros((2, n, r))
    A[0], B[0] = rank_factorize_padded(M1, r)
    return LomeParams(W.copy(), A, B)


def random_be_params(rng: np.random.Generator, m: int, n: int, K: int) -> BeParams:
    """Gaussian BatchEnsemble parameters with entries bounded away from zero."""

    def nonzero(shape):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < 0.1, np.copysign(0.1, x) + x, x)

    return BeParams(nonzero((m, n)), nonzero((K, m)), nonzero((K, n)))


def check_trials(n_trials: int, seed: int = 0, r: int = 2, max_dim: int = 8, max_k: int = 4):
    """Yield one verdict dict per randomized trial (used by the CLI).

    Each trial checks inclusion (a BE sample embedded at rank ``r``) and
    strictness (the counterexample on a random non-zero ``W``).
    """
    rng = make_rng(seed)
    for t in range(n_trials):
        m, n = (int(v) for v in rng.integers(2, max_dim + 1, size=2))
        K = int(rng.integers(2, max_k + 1))
        be = random_be_params(rng, m, n, K)
        lome = embed_be_into_lome(be, r)
        target = be.effective_weights()
        got = lome.effective_weights()
        rel = float(np.max(np.abs(got - target)) / np.max(np.abs(target)))
        be_w = ratio_rank_witness(target[0], target[1])
        cx = build_counterexample(m, n, r, random_be_params(rng, m, n, 1).W)
        w = cx.effective_weights()
        cx_w = ratio_rank_witness(w[0], w[1])
        yield {
            "trial": t,
            "m": m,
            "n": n,
            "K": K,
            "r": r,
            "embed_max_rel_error": rel,
            "embed_ok": rel < 1e-9,
            "be_ratio_rank_bound": be_w.rank_lower_bound,
            "counterexample_rank_bound": cx_w.rank_lower_bound,
            "counterexample_determinant": cx_w.determinant,
            "ok": rel < 1e-9 and be_w.rank_lower_bound <= 1 and cx_w.rank_lower_bound == 2,
        }
