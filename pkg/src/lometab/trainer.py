"""AdamW training loop with global-norm clipping and patience-based early stopping."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from .data import TabularDataset, TargetScaler
from .model import EnsembleModel, backward, forward, member_loss, predict
from .numkernel import make_rng


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 256
    max_epochs: int = 300
    clip_norm: float = 1.0
    patience: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if cfg.weight_decay:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads, max_norm: float):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns ``grads``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_metric: float = math.nan
    stopped_epoch: int = 0
    wall_time: float = 0.0
    max_clipped_grad_norm: float = 0.0
    higher_is_better: bool = True

    def dump(self, path) -> Path:
        """One JSON object per epoch, then a summary line."""
        path = Path(path)
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps({"type": "epoch", **rec}) + "\n")
            summary = asdict(self)
            summary.pop("epochs")
            fh.write(json.dumps({"type": "summary", **summary}) + "\n")
        return path


def evaluate(model: EnsembleModel, ds: TabularDataset, part: str, scaler: TargetScaler | None = None):
    """Prediction on one split with regression outputs mapped back to the original scale."""
    x_num, x_cat, y = ds.split(part)
    pred = predict(model, x_num, x_cat if x_cat.shape[1] else None)
    if model.config.task == "regression" and scaler is not None:
        pred.members = scaler.inverse(pred.members)
        pred.mean = pred.members.mean(axis=0)
    return pred, y


def validation_metric(model, ds, scaler=None) -> float:
    pred, y = evaluate(model, ds, "val", scaler)
    return metrics.task_score(pred.mean, y, model.config.task)


def target_scaler_for(ds: TabularDataset) -> TargetScaler | None:
    if ds.task != "regression":
        return None
    return ds.target_scaler or TargetScaler.fit(ds.y[ds.train_idx])


def fit(
    model: EnsembleModel,
    ds: TabularDataset,
    cfg: TrainConfig,
    on_epoch: Callable[[int, EnsembleModel], None] | None = None,
):
    """Train ``model`` in place and return ``(model, report)``.

    Validation uses RMSE (minimised) for regression and accuracy (maximised)
    otherwise.  Training stops after ``patience`` consecutive epochs without a
    strict improvement; the best-epoch parameters are restored before
    returning.  ``on_epoch(epoch, model)`` is called with ``epoch = 0`` before
    the first update and after every epoch.
    """
    for part in ("train", "val"):
        if len(getattr(ds, f"{part}_idx")) == 0:
            raise ValueError(f"empty {part} split")
    task = model.config.task
    higher = metrics.higher_is_better(task)
    scaler = target_scaler_for(ds)
    x_num, x_cat, y = ds.split("train")
    has_cat = x_cat.shape[1] > 0
    y_fit = scaler.transform(y) if scaler is not None else y

    rng = make_rng(cfg.seed)
    names, params, grads = [], [], []
    for name, p, g in model.parameters():
        names.append(name)
        params.append(p)
        grads.append(g)
    state = AdamState.zeros_like(params)
    report = TrainReport(higher_is_better=higher)
    best_state = model.state_dict()
    best = -math.inf if higher else math.inf
    stale = 0
    start = time.perf_counter()
    if on_epoch is not None:
        on_epoch(0, model)

    n = len(y)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            out, cache = forward(model, x_num[idx], x_cat[idx] if has_cat else None, training=True, rng=rng)
            loss, g_out = member_loss(out, y_fit[idx], task)
            model.zero_grad()
            backward(model, cache, g_out)
            clip_gradients(grads, cfg.clip_norm)
            report.max_clipped_grad_norm = max(report.max_clipped_grad_norm, global_norm(grads))
            adamw_step(params, grads, state, cfg)
            loss_sum += loss * len(idx)
        val = validation_metric(model, ds, scaler)
        report.epochs.append({"epoch": epoch, "train_loss": loss_sum / n, "val_metric": val})
        if on_epoch is not None:
            on_epoch(epoch, model)
        improved = val > best if higher else val < best
        if improved:
            best, stale = val, 0
            best_state = model.state_dict()
            report.best_epoch = epoch
        else:
            stale += 1
        report.stopped_epoch = epoch
        if stale >= cfg.patience:
            break

    model.load_state_dict(best_state)
    report.best_val_metric = best
    report.wall_time = time.perf_counter() - start
    return model, report
