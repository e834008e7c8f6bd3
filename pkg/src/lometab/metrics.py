"""Task scores, ensemble diversity measures and calibration error.

Member predictions are passed as arrays:

* classification: ``probs`` of shape ``(K, N, C)`` (rows sum to one)
* regression: ``preds`` of shape ``(K, N)``

All functions are pure and vectorised over samples; pair sums are taken over
``i < j`` and normalised by ``K (K - 1) / 2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

PROB_CLAMP = 1e-12
METRIC_SCHEMA_VERSION = 1


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"member probabilities must be (K, N, C), got shape {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
        raise ValueError("member probabilities must be non-negative and sum to 1")
    return p


def pairwise_kl(probs) -> float:
    """Symmetrised KL averaged over member pairs and samples.

    Probabilities are clamped to ``>= 1e-12`` before taking logs.
    """
    p = _check_probs(probs)
    K = p.shape[0]
    if K < 2:
        raise ValueError("pairwise KL needs at least two members")
    logp = np.log(np.maximum(p, PROB_CLAMP))
    total = 0.0
    for i in range(K - 1):
        # 0.5 * [KL(p_i||p_j) + KL(p_j||p_i)] = 0.5 * sum_c (p_i - p_j)(log p_i - log p_j)
        diff = (p[i] - p[i + 1 :]) * (logp[i] - logp[i + 1 :])
        total += 0.5 * diff.sum(axis=-1).mean(axis=-1).sum()
    return float(total * 2.0 / (K * (K - 1)))


def argmax_disagreement(probs) -> float:
    """Pairwise rate of differing argmax labels (ties go to the lowest class index)."""
    p = _check_probs(probs)
    K = p.shape[0]
    if K < 2:
        raise ValueError("disagreement needs at least two members")
    labels = p.argmax(axis=-1)  # (K, N)
    total = 0.0
    for i in range(K - 1):
        total += (labels[i] != labels[i + 1 :]).mean(axis=-1).sum()
    return float(total * 2.0 / (K * (K - 1)))


def kv_ambiguity(preds, target_variance: float | None = None) -> tuple[float, float | None]:
    """Krogh-Vedelsby ambiguity ``A`` and ``A / target_variance``.

    ``target_variance`` is the variance of the raw training targets; the
    normalised value is ``None`` when it is not given.
    """
    f = np.asarray(preds, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"member predictions must be (K, N), got {f.shape}")
    A = float(np.mean((f - f.mean(axis=0)) ** 2))
    if target_variance is None:
        return A, None
    if not target_variance > 0:
        raise ValueError("normalised ambiguity needs a positive target variance")
    return A, A / target_variance


def kv_decomposition_check(preds, y) -> float:
    """Largest per-sample residual of ensemble error = mean member error - ambiguity."""
    f = np.asarray(preds, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fbar = f.mean(axis=0)
    ens_err = (fbar - y) ** 2
    avg_err = np.mean((f - y) ** 2, axis=0)
    amb = np.mean((f - fbar) ** 2, axis=0)
    return float(np.max(np.abs(ens_err - (avg_err - amb)))) if f.size else 0.0


def ece_bin_index(conf, n_bins: int = 15) -> np.ndarray:
    """Equal-width bins on [0, 1]; a value on an interior edge goes to the upper bin, 1.0 to the last."""
    conf = np.asarray(conf, dtype=np.float64)
    return np.minimum(np.floor(conf * n_bins).astype(np.int64), n_bins - 1)


def ece(probs, y, n_bins: int = 15) -> float:
    """Expected calibration error of the ensemble-averaged probabilities.

    ``probs`` may be member probabilities ``(K, N, C)`` or already averaged ``(N, C)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    pbar = p.mean(axis=0) if p.ndim == 3 else p
    y = np.asarray(y).astype(np.int64)
    N = len(y)
    if N == 0:
        return 0.0
    conf = pbar.max(axis=-1)
    correct = (pbar.argmax(axis=-1) == y).astype(np.float64)
    bins = ece_bin_index(conf, n_bins)
    counts = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(bins, weights=correct, minlength=n_bins)
    # bins are summed in index order (not pairwise) so the result is independent of array layout
    total = 0.0
    for m in np.flatnonzero(counts):
        total += counts[m] / N * abs(acc_sum[m] / counts[m] - conf_sum[m] / counts[m])
    return float(total)


def rmse(pred, y) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(math.sqrt(np.mean((pred - y) ** 2)))


def accuracy(mean_probs, y) -> float:
    return float(np.mean(np.asarray(mean_probs).argmax(axis=-1) == np.asarray(y)))


def task_score(mean_pred, y, task: str) -> float:
    """RMSE (original scale) for regression, ensemble-argmax accuracy otherwise."""
    if task == "regression":
        return rmse(mean_pred, y)
    return accuracy(mean_pred, y)


def higher_is_better(task: str) -> bool:
    return task != "regression"


def relative_score_to_reference(score: float, ref_score: float, higher_is_better: bool) -> float:
    """Signed percent change versus a reference; positive always means improvement."""
    if ref_score == 0:
        raise ZeroDivisionError("reference score is zero")
    if higher_is_better:
        return (score / ref_score - 1.0) * 100.0
    if score == 0:
        return math.inf
    return (ref_score / score - 1.0) * 100.0


@dataclass
class DiversityReport:
    task_score: float | None = None
    accuracy: float | None = None
    rmse: float | None = None
    pairwise_kl: float | None = None
    disagreement: float | None = None
    ambiguity: float | None = None
    normalized_ambiguity: float | None = None
    ece: float | None = None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_json(self) -> str:
        return json.dumps({"schema_version": METRIC_SCHEMA_VERSION, **asdict(self)}, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "DiversityReport":
        data = json.loads(line)
        version = data.pop("schema_version", METRIC_SCHEMA_VERSION)
        if version != METRIC_SCHEMA_VERSION:
            raise ValueError(f"unsupported metric schema version {version}")
        return cls(**data)


def diversity_report(task: str, members, y, target_variance: float | None = None, n_bins: int = 15) -> DiversityReport:
    """Every applicable metric for one set of member predictions.

    Pairwise measures are left as ``None`` for single-member ensembles.
    """
    members = np.asarray(members, dtype=np.float64)
    K = members.shape[0]
    if task == "regression":
        mean = members.mean(axis=0)
        score = rmse(mean, y)
        rep = DiversityReport(task_score=score, rmse=score)
        if K >= 2:
            amb, namb = kv_ambiguity(members, target_variance if target_variance else None)
            rep.ambiguity, rep.normalized_ambiguity = amb, namb
        return rep
    mean = members.mean(axis=0)
    acc = accuracy(mean, y)
    rep = DiversityReport(task_score=acc, accuracy=acc, ece=ece(members, y, n_bins))
    if K >= 2:
        rep.pairwise_kl = pairwise_kl(members)
        rep.disagreement = argmax_disagreement(members)
    return rep
