"""Implicit-ensemble MLP: shared PLE embedding, L ensemble blocks, K member heads."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (
    EnsembleLinearParams,
    Kind,
    MemberHeads,
    PleEmbedding,
    backward_ensemble_linear,
    backward_heads,
    encode_ple,
    forward_ensemble_linear,
    forward_heads,
    init_ensemble_linear,
    init_member_heads,
    relu_dropout,
    relu_dropout_backward,
)
from .numkernel import ShapeError, log_softmax, make_rng, sigmoid, softplus, stable_softmax

TASKS = ("regression", "binary", "multiclass")
CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-12


@dataclass
class ModelConfig:
    task: str = "binary"
    n_classes: int = 2
    K: int = 32
    r: int = 4
    sigma_init: float = 0.5
    L: int = 2
    d: int = 256
    p_drop: float = 0.0
    variant: str = "multiplicative"
    n_bins: int = 16
    seed: int = 0

    def __post_init__(self):
        self.variant = Kind.parse(self.variant).value
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass needs n_classes >= 2")
        if self.task == "binary":
            self.n_classes = 2
        if not 1 <= self.K <= 128:
            raise ValueError(f"K must be in [1, 128], got {self.K}")
        if not 1 <= self.r <= 64:
            raise ValueError(f"r must be in [1, 64], got {self.r}")
        if self.sigma_init < 0:
            raise ValueError("sigma_init must be non-negative")
        if not 1 <= self.L <= 4:
            raise ValueError(f"L must be in [1, 4], got {self.L}")
        if self.d < 1:
            raise ValueError("d must be positive")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.task == "multiclass" else 1


@dataclass
class EnsembleModel:
    config: ModelConfig
    ple: PleEmbedding
    blocks: list[EnsembleLinearParams]
    heads: MemberHeads

    def parameters(self):
        """Yield ``(name, param, grad)`` triples; arrays are updated in place by the optimizer."""
        for i, blk in enumerate(self.blocks):
            for key in blk.params:
                yield f"blocks.{i}.{key}", blk.params[key], blk.grads[key]
        for key in self.heads.params:
            yield f"heads.{key}", self.heads.params[key], self.heads.grads[key]

    def zero_grad(self):
        for blk in self.blocks:
            blk.zero_grad()
        self.heads.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p, _ in self.parameters():
            p[...] = state[name]

    def clone(self) -> "EnsembleModel":
        return copy.deepcopy(self)


def init_model(cfg: ModelConfig, ple: PleEmbedding, rng: np.random.Generator | None = None) -> EnsembleModel:
    cfg.validate()
    if rng is None:
        rng = make_rng(cfg.seed)
    widths = [ple.width] + [cfg.d] * cfg.L
    blocks = [
        init_ensemble_linear(rng, cfg.variant, widths[i], widths[i + 1], cfg.K, cfg.r, cfg.sigma_init)
        for i in range(cfg.L)
    ]
    heads = init_member_heads(rng, cfg.K, cfg.d, cfg.out_dim)
    return EnsembleModel(copy.copy(cfg), ple, blocks, heads)


@dataclass
class ForwardCache:
    embedded: np.ndarray
    layers: list = field(default_factory=list)  # (linear cache, pre-activation, dropout mask)
    head_input: np.ndarray | None = None


def forward(model: EnsembleModel, x_num, x_cat=None, training: bool = False, rng: np.random.Generator | None = None):
    """Member outputs of shape ``(N, K, out_dim)`` plus a cache (``None`` in eval mode)."""
    cfg = model.config
    E = encode_ple(model.ple, np.atleast_2d(x_num), None if x_cat is None else np.atleast_2d(x_cat))
    H = np.broadcast_to(E, (cfg.K,) + E.shape)
    cache = ForwardCache(E) if training else None
    for blk in model.blocks:
        Z, lin_cache = forward_ensemble_linear(blk, H, training=training)
        H, mask = relu_dropout(Z, cfg.p_drop, training, rng)
        if training:
            cache.layers.append((lin_cache, Z, mask))
    if training:
        cache.head_input = H
    out = forward_heads(model.heads, H)
    return out.transpose(1, 0, 2), cache


def backward(model: EnsembleModel, cache: ForwardCache, grad_outputs) -> None:
    """Accumulate parameter gradients given ``dL/d outputs`` of shape ``(N, K, out_dim)``."""
    if cache is None:
        raise RuntimeError("backward needs a training-mode forward cache")
    G = np.ascontiguousarray(np.asarray(grad_outputs).transpose(1, 0, 2))
    G = backward_heads(model.heads, cache.head_input, G)
    for blk, (lin_cache, Z, mask) in zip(reversed(model.blocks), reversed(cache.layers)):
        G = relu_dropout_backward(Z, mask, G)
        G = backward_ensemble_linear(blk, lin_cache, G)


def member_loss(outputs, y, task: str):
    """Mean over members of the mean per-sample task loss, and its gradient w.r.t. ``outputs``.

    ``outputs`` has shape ``(N, K, out_dim)``.  Regression uses squared error,
    binary uses BCE on a single logit, multiclass uses softmax cross-entropy.
    """
    o = np.asarray(outputs, dtype=np.float64)
    if o.ndim != 3:
        raise ShapeError(f"outputs must be (N, K, out), got {o.shape}")
    N, K, C = o.shape
    y = np.asarray(y)
    if y.shape != (N,):
        raise ShapeError(f"targets must have shape ({N},), got {y.shape}")
    scale = 1.0 / (N * K)
    if task == "regression":
        diff = o[:, :, 0] - y[:, None]
        grad = np.zeros_like(o)
        grad[:, :, 0] = 2.0 * diff * scale
        return float(np.sum(diff * diff) * scale), grad
    if task == "binary":
        if np.any((y != 0) & (y != 1)):
            raise ValueError("binary labels must be 0 or 1")
        z = o[:, :, 0]
        t = y[:, None].astype(np.float64)
        loss = softplus(z) - t * z
        grad = np.zeros_like(o)
        grad[:, :, 0] = (sigmoid(z) - t) * scale
        return float(loss.sum() * scale), grad
    if task == "multiclass":
        labels = y.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= C) or np.any(labels != y):
            raise ValueError(f"labels must be integers in [0, {C})")
        logp = log_softmax(o, axis=-1)
        picked = np.take_along_axis(logp, labels[:, None, None].repeat(K, axis=1), axis=-1)
        grad = np.exp(logp)
        grad[np.arange(N)[:, None], np.arange(K)[None, :], labels[:, None]] -= 1.0
        return float(-picked.sum() * scale), grad * scale
    raise ValueError(f"unknown task {task!r}")


@dataclass
class Prediction:
    """Ensemble prediction and the per-member predictions it averages.

    Regression: ``mean`` is ``(N,)`` and ``members`` ``(K, N)``.
    Classification: ``mean`` is ``(N, C)`` and ``members`` ``(K, N, C)``; binary
    tasks use ``C = 2`` columns ``[1 - p, p]``.
    """

    task: str
    mean: np.ndarray
    members: np.ndarray


def member_probabilities(outputs, task: str) -> np.ndarray:
    o = np.asarray(outputs, dtype=np.float64).transpose(1, 0, 2)
    if task == "binary":
        p = sigmoid(o[:, :, 0])
        return np.stack([1.0 - p, p], axis=-1)
    if task == "multiclass":
        return stable_softmax(o, axis=-1)
    raise ValueError(f"{task!r} has no class probabilities")


def predict(model: EnsembleModel, x_num, x_cat=None, batch_size: int = 4096) -> Prediction:
    task = model.config.task
    chunks = []
    n = len(np.atleast_2d(x_num))
    for start in range(0, max(n, 1), batch_size):
        sl = slice(start, start + batch_size)
        out, _ = forward(model, np.atleast_2d(x_num)[sl], None if x_cat is None else np.atleast_2d(x_cat)[sl])
        chunks.append(out)
    out = np.concatenate(chunks, axis=0)
    if task == "regression":
        members = out[:, :, 0].T.copy()
        return Prediction(task, members.mean(axis=0), members)
    members = member_probabilities(out, task)
    return Prediction(task, members.mean(axis=0), members)


# --------------------------------------------------------------------------
# checkpoint: a numpy .npz archive; "__meta__" holds a JSON header


def save_checkpoint(model: EnsembleModel, path) -> Path:
    path = Path(path)
    meta = {
        "format": "lometab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "cat_cardinalities": list(model.ple.cat_cardinalities),
        "n_numeric": model.ple.n_numeric,
    }
    arrays = {f"param:{name}": p for name, p, _ in model.parameters()}
    for j, e in enumerate(model.ple.edges):
        arrays[f"ple:{j}"] = e
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> EnsembleModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "lometab-checkpoint":
            raise ValueError(f"{path} is not a lometab checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg = ModelConfig(**meta["config"])
        ple = PleEmbedding([z[f"ple:{j}"] for j in range(meta["n_numeric"])], meta["cat_cardinalities"])
        model = init_model(cfg, ple, make_rng(0))
        model.load_state_dict({name: z[f"param:{name}"] for name, _, _ in model.parameters()})
    return model
