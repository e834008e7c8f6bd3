"""Ensemble linear layers, piecewise-linear embeddings, ReLU/dropout and member heads.

Member-indexed batches are arrays of shape ``(K, N, d)``: member ``k`` sees the
rows ``H[k]``.  Weights follow the ``(d_out, d_in)`` convention, so a member
computes ``z = W_k h + bias``, i.e. ``Z[k] = H[k] @ W_k.T + bias`` for a batch.

Three parameterizations share the same shared weight ``W`` and bias:

* ``MULTIPLICATIVE``: ``W_k = W * (1 + A_k B_k^T)``
* ``ADDITIVE``:       ``W_k = W + A_k B_k^T``
* ``RANK1``:          ``W_k = W * (s_k r_k^T)``   (BatchEnsemble mask)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .numkernel import ShapeError, kaiming_uniform, sample_gaussian


class Kind(str, enum.Enum):
    MULTIPLICATIVE = "multiplicative"
    ADDITIVE = "additive"
    RANK1 = "rank1"

    @classmethod
    def parse(cls, value: "Kind | str") -> "Kind":
        if isinstance(value, Kind):
            return value
        aliases = {
            "multiplicativelowrank": cls.MULTIPLICATIVE,
            "lometab": cls.MULTIPLICATIVE,
            "additivelowrank": cls.ADDITIVE,
            "rank1mask": cls.RANK1,
            "batchensemble": cls.RANK1,
        }
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key == member.value:
                return member
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown variant {value!r}")


@dataclass
class EnsembleLinearParams:
    """Shared ``W``/``bias`` plus per-member adapters, with matching gradient slots.

    For the low-rank kinds ``params`` holds ``A`` of shape ``(K, d_out, r)`` and
    ``B`` of shape ``(K, d_in, r)``; for ``RANK1`` it holds ``s`` ``(K, d_out)``
    and ``r`` ``(K, d_in)``.
    """

    kind: Kind
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}
        self._check()
        if not self.grads:
            self.zero_grad()

    def _check(self):
        W, bias = self.params["W"], self.params["bias"]
        if W.ndim != 2 or bias.shape != (W.shape[0],):
            raise ShapeError(f"W {W.shape} / bias {bias.shape} mismatch")
        d_out, d_in = W.shape
        if self.kind is Kind.RANK1:
            s, r = self.params["s"], self.params["r"]
            if s.ndim != 2 or r.ndim != 2 or s.shape[1] != d_out or r.shape[1] != d_in or len(s) != len(r):
                raise ShapeError(f"rank-1 mask shapes s={s.shape} r={r.shape} for W {W.shape}")
        else:
            A, B = self.params["A"], self.params["B"]
            if A.ndim != 3 or B.ndim != 3 or A.shape[:2] != (len(A), d_out) or B.shape[1] != d_in:
                raise ShapeError(f"adapter shapes A={A.shape} B={B.shape} for W {W.shape}")
            if len(A) != len(B) or A.shape[2] != B.shape[2]:
                raise ShapeError(f"adapter shapes A={A.shape} B={B.shape} disagree")

    @property
    def K(self) -> int:
        return len(self.params["s" if self.kind is Kind.RANK1 else "A"])

    @property
    def rank(self) -> int:
        return 1 if self.kind is Kind.RANK1 else self.params["A"].shape[2]

    @property
    def d_out(self) -> int:
        return self.params["W"].shape[0]

    @property
    def d_in(self) -> int:
        return self.params["W"].shape[1]

    def zero_grad(self):
        if self.grads.keys() == self.params.keys():
            for g in self.grads.values():
                g.fill(0.0)
        else:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def init_ensemble_linear(
    rng: np.random.Generator,
    kind: Kind | str,
    d_in: int,
    d_out: int,
    K: int,
    r: int,
    sigma_init: float,
) -> EnsembleLinearParams:
    """Kaiming-uniform shared weight, zero bias, adapters drawn from N(0, sigma_init^2).

    For ``RANK1`` the masks are ``1 + N(0, sigma_init^2)`` so that ``sigma_init = 0``
    reproduces the shared weight exactly, as for the other two kinds.
    """
    kind = Kind.parse(kind)
    W = kaiming_uniform(rng, d_out, d_in)
    bias = np.zeros(d_out)
    if kind is Kind.RANK1:
        s = 1.0 + sample_gaussian(rng, K, d_out, sigma_init)
        rv = 1.0 + sample_gaussian(rng, K, d_in, sigma_init)
        return EnsembleLinearParams(kind, {"W": W, "bias": bias, "s": s, "r": rv})
    A = sample_gaussian(rng, K * d_out, r, sigma_init).reshape(K, d_out, r)
    B = sample_gaussian(rng, K * d_in, r, sigma_init).reshape(K, d_in, r)
    return EnsembleLinearParams(kind, {"W": W, "bias": bias, "A": A, "B": B})


def _member_masks(p: EnsembleLinearParams) -> np.ndarray:
    """Stack of per-member factors: ``A_k B_k^T`` (low-rank) or ``s_k r_k^T`` (rank-1)."""
    if p.kind is Kind.RANK1:
        return p.params["s"][:, :, None] * p.params["r"][:, None, :]
    return np.matmul(p.params["A"], p.params["B"].transpose(0, 2, 1))


def effective_weights(p: EnsembleLinearParams) -> np.ndarray:
    """All materialized member weights, shape ``(K, d_out, d_in)``."""
    W = p.params["W"]
    M = _member_masks(p)
    if p.kind is Kind.MULTIPLICATIVE:
        return W * (1.0 + M)
    if p.kind is Kind.ADDITIVE:
        return W + M
    return W * M


def effective_weight(p: EnsembleLinearParams, k: int) -> np.ndarray:
    if not 0 <= k < p.K:
        raise IndexError(f"member index {k} out of range for K={p.K}")
    W = p.params["W"]
    if p.kind is Kind.RANK1:
        return W * np.outer(p.params["s"][k], p.params["r"][k])
    M = p.params["A"][k] @ p.params["B"][k].T
    if p.kind is Kind.MULTIPLICATIVE:
        return W * (1.0 + M)
    return W + M


@dataclass
class LayerActivationCache:
    inputs: np.ndarray
    weights: np.ndarray


def _member_inputs(p: EnsembleLinearParams, H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim == 2:
        H = np.broadcast_to(H, (p.K,) + H.shape)
    if H.ndim != 3 or H.shape[0] != p.K or H.shape[2] != p.d_in:
        raise ShapeError(f"expected inputs (K={p.K}, N, {p.d_in}), got {H.shape}")
    return H


def forward_factored(p: EnsembleLinearParams, H) -> np.ndarray:
    """Forward pass without materializing ``W_k``.

    Multiplicative: ``z = W h + sum_t a_t * (W (b_t * h)) + bias`` over adapter
    columns ``t``.  Additive: ``z = W h + A (B^T h) + bias``.  Rank-1:
    ``z = s * (W (r * h)) + bias``.
    """
    H = _member_inputs(p, H)
    W, bias = p.params["W"], p.params["bias"]
    if p.kind is Kind.RANK1:
        return np.matmul(H * p.params["r"][:, None, :], W.T) * p.params["s"][:, None, :] + bias
    A, B = p.params["A"], p.params["B"]
    Z = np.matmul(H, W.T)
    if p.kind is Kind.ADDITIVE:
        return Z + np.matmul(np.matmul(H, B), A.transpose(0, 2, 1)) + bias
    # (K, r, N, d_in) -> (K, r, N, d_out)
    scaled = H[:, None, :, :] * B.transpose(0, 2, 1)[:, :, None, :]
    Z = Z + np.einsum("ktnd,kdt->knd", np.matmul(scaled, W.T), A)
    return Z + bias


def forward_ensemble_linear(p: EnsembleLinearParams, H, training: bool = False, factored: bool = False):
    """Return ``(Z, cache)``; ``cache`` is ``None`` outside training mode.

    The default path materializes the K member weights once per call and runs
    one batched product, which is cheaper than the factored path whenever the
    batch is larger than the rank.  ``factored=True`` takes the adapter-column
    path instead and is used as a cross-check.
    """
    H = _member_inputs(p, H)
    if factored:
        Z = forward_factored(p, H)
        if not training:
            return Z, None
        Wk = effective_weights(p)
    else:
        Wk = effective_weights(p)
        Z = np.matmul(H, Wk.transpose(0, 2, 1)) + p.params["bias"]
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("non-finite ensemble-linear output")
    return Z, (LayerActivationCache(H, Wk) if training else None)


def backward_ensemble_linear(p: EnsembleLinearParams, cache: LayerActivationCache | None, G) -> np.ndarray:
    """Accumulate parameter gradients into ``p.grads``; return input gradients ``(K, N, d_in)``.

    With ``G_Wk = sum_n g_kn h_kn^T`` (member-wise outer-product sums):

    * multiplicative: dW = sum_k G_Wk * (1 + A_k B_k^T), dA_k = (G_Wk * W) B_k,
      dB_k = (G_Wk * W)^T A_k
    * additive: dW = sum_k G_Wk, dA_k = G_Wk B_k, dB_k = G_Wk^T A_k
    * rank-1: dW = sum_k G_Wk * s_k r_k^T, ds_k = (G_Wk * W) r_k, dr_k = (G_Wk * W)^T s_k
    """
    if cache is None:
        raise RuntimeError("backward called without a training-mode forward cache")
    G = np.asarray(G, dtype=np.float64)
    H, Wk = cache.inputs, cache.weights
    if G.shape != H.shape[:2] + (p.d_out,):
        raise ShapeError(f"upstream gradient {G.shape} does not match outputs {H.shape[:2] + (p.d_out,)}")
    W = p.params["W"]
    GW = np.matmul(G.transpose(0, 2, 1), H)  # (K, d_out, d_in)
    grads = p.grads
    grads["bias"] += G.sum(axis=(0, 1))
    if p.kind is Kind.ADDITIVE:
        A, B = p.params["A"], p.params["B"]
        grads["W"] += GW.sum(axis=0)
        grads["A"] += np.matmul(GW, B)
        grads["B"] += np.matmul(GW.transpose(0, 2, 1), A)
    else:
        M = _member_masks(p)
        GWW = GW * W
        if p.kind is Kind.MULTIPLICATIVE:
            A, B = p.params["A"], p.params["B"]
            grads["W"] += (GW * (1.0 + M)).sum(axis=0)
            grads["A"] += np.matmul(GWW, B)
            grads["B"] += np.matmul(GWW.transpose(0, 2, 1), A)
        else:
            s, rv = p.params["s"], p.params["r"]
            grads["W"] += (GW * M).sum(axis=0)
            grads["s"] += np.einsum("koi,ki->ko", GWW, rv)
            grads["r"] += np.einsum("koi,ko->ki", GWW, s)
    return np.matmul(G, Wk)


# --------------------------------------------------------------------------
# ReLU + dropout


def relu_dropout(Z, p_drop: float, training: bool, rng: np.random.Generator | None = None):
    """ReLU followed by inverted dropout; masks are drawn independently per member.

    Returns ``(out, mask)`` where ``mask`` already carries the ``1/(1-p)`` scale
    (``None`` when no dropout is applied).
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p_drop}")
    Z = np.asarray(Z, dtype=np.float64)
    out = np.maximum(Z, 0.0)
    if not training or p_drop == 0.0:
        return out, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(Z.shape) >= p_drop
    mask = keep / (1.0 - p_drop)
    return out * mask, mask


def relu_dropout_backward(Z, mask, G) -> np.ndarray:
    G = np.asarray(G) * (np.asarray(Z) > 0)
    return G if mask is None else G * mask


# --------------------------------------------------------------------------
# member-specific prediction heads


@dataclass
class MemberHeads:
    """K independent dense heads: ``o_k = V_k h_k + c_k``."""

    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}
        V, c = self.params["W"], self.params["bias"]
        if V.ndim != 3 or c.shape != V.shape[:2]:
            raise ShapeError(f"head shapes W={V.shape} bias={c.shape}")
        if not self.grads:
            self.zero_grad()

    @property
    def K(self) -> int:
        return self.params["W"].shape[0]

    def zero_grad(self):
        if self.grads.keys() == self.params.keys():
            for g in self.grads.values():
                g.fill(0.0)
        else:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def init_member_heads(rng: np.random.Generator, K: int, d_in: int, d_out: int) -> MemberHeads:
    """One Kaiming-uniform draw copied to every member; heads then train independently.

    Identical starting heads keep members exactly equal when the adapters are
    zero, so all initial member diversity comes from the adapters.
    """
    V = np.repeat(kaiming_uniform(rng, d_out, d_in)[None], K, axis=0)
    return MemberHeads({"W": V, "bias": np.zeros((K, d_out))})


def forward_heads(h: MemberHeads, H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 3 or H.shape[0] != h.K or H.shape[2] != h.params["W"].shape[2]:
        raise ShapeError(f"head input {H.shape} incompatible with heads {h.params['W'].shape}")
    return np.matmul(H, h.params["W"].transpose(0, 2, 1)) + h.params["bias"][:, None, :]


def backward_heads(h: MemberHeads, H, G) -> np.ndarray:
    h.grads["W"] += np.matmul(G.transpose(0, 2, 1), H)
    h.grads["bias"] += G.sum(axis=1)
    return np.matmul(G, h.params["W"])


# --------------------------------------------------------------------------
# piecewise-linear embedding of numeric features (+ one-hot categoricals)


@dataclass
class PleEmbedding:
    """Quantile bin edges per numeric feature plus categorical cardinalities.

    A feature whose deduplicated edges collapse to one value is *degenerate* and
    is passed through as a single raw column.  Each categorical feature with
    ``c`` known levels is one-hot encoded over ``c + 1`` columns; the last
    column is the unknown bucket.
    """

    edges: list[np.ndarray]
    cat_cardinalities: list[int] = field(default_factory=list)

    @property
    def degenerate(self) -> list[bool]:
        return [len(e) < 2 for e in self.edges]

    @property
    def n_numeric(self) -> int:
        return len(self.edges)

    def widths(self) -> list[int]:
        return [max(len(e) - 1, 1) for e in self.edges]

    @property
    def width(self) -> int:
        return sum(self.widths()) + sum(c + 1 for c in self.cat_cardinalities)


def fit_ple(train_values, n_bins: int, cat_cardinalities=None) -> PleEmbedding:
    """Edges at the empirical quantiles ``t / n_bins``, ``t = 0..n_bins``, deduplicated."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if isinstance(train_values, np.ndarray) and train_values.ndim == 2:
        columns = [train_values[:, j] for j in range(train_values.shape[1])]
    else:
        columns = [np.asarray(v, dtype=np.float64).ravel() for v in train_values]
    levels = np.linspace(0.0, 1.0, n_bins + 1)
    edges = []
    for j, col in enumerate(columns):
        if col.size == 0:
            raise ValueError(f"feature {j} has no training values")
        if not np.all(np.isfinite(col)):
            raise ValueError(f"feature {j} has non-finite training values")
        edges.append(np.unique(np.quantile(col, levels)))
    return PleEmbedding(edges, list(cat_cardinalities or []))


def encode_ple(e: PleEmbedding, x_num, x_cat=None) -> np.ndarray:
    """Component ``t`` of a feature is ``clip((x - b_{t-1}) / (b_t - b_{t-1}), 0, 1)``.

    Accepts a single row or an ``(N, n_numeric)`` batch; categorical codes
    outside ``[0, c)`` land in the unknown bucket.
    """
    x_num = np.asarray(x_num, dtype=np.float64)
    single = x_num.ndim == 1
    x_num = np.atleast_2d(x_num)
    if x_num.shape[1] != e.n_numeric:
        raise ShapeError(f"expected {e.n_numeric} numeric features, got {x_num.shape[1]}")
    blocks = []
    for j, b in enumerate(e.edges):
        col = x_num[:, j : j + 1]
        if len(b) < 2:
            blocks.append(col)
            continue
        lo, hi = b[:-1], b[1:]
        blocks.append(np.clip((col - lo) / (hi - lo), 0.0, 1.0))
    if e.cat_cardinalities:
        if x_cat is None:
            raise ShapeError("categorical codes required")
        x_cat = np.atleast_2d(np.asarray(x_cat, dtype=np.int64))
        if x_cat.shape[1] != len(e.cat_cardinalities):
            raise ShapeError(f"expected {len(e.cat_cardinalities)} categorical features, got {x_cat.shape[1]}")
        for j, c in enumerate(e.cat_cardinalities):
            codes = x_cat[:, j]
            codes = np.where((codes >= 0) & (codes < c), codes, c)
            onehot = np.zeros((len(codes), c + 1))
            onehot[np.arange(len(codes)), codes] = 1.0
            blocks.append(onehot)
    out = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(x_num), 0))
    return out[0] if single else out
