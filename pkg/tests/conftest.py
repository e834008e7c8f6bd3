import numpy as np
import pytest

from lometab.layers import fit_ple
from lometab.model import ModelConfig, init_model
from lometab.numkernel import make_rng

EPS = 1e-5


def central_differences(loss_fn, param: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Entry-by-entry central differences of ``loss_fn()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        old = param[idx]
        param[idx] = old + eps
        up = loss_fn()
        param[idx] = old - eps
        down = loss_fn()
        param[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``||a - f|| / max(||a||, ||f||)`` (0 when both vanish)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0 else float(np.linalg.norm(analytic - numeric) / scale)


def small_problem(task: str, variant: str, n: int = 16, seed: int = 0, K: int = 3, r: int = 2, d: int = 8,
                  L: int = 2, sigma_init: float = 0.5):
    """Tiny model + batch with three numeric and one categorical feature."""
    rng = np.random.default_rng(seed)
    x_num = rng.normal(size=(n, 3))
    x_cat = rng.integers(0, 3, size=(n, 1))
    n_classes = 3 if task == "multiclass" else 2
    if task == "regression":
        y = rng.normal(size=n)
    else:
        y = rng.integers(0, n_classes, size=n)
    ple = fit_ple(rng.normal(size=(64, 3)), 4, [3])
    cfg = ModelConfig(task=task, n_classes=n_classes, K=K, r=r, sigma_init=sigma_init, L=L, d=d, variant=variant)
    model = init_model(cfg, ple, make_rng(seed + 1))
    # shared-bias and head parameters start at zero; move them off so every gradient is exercised
    for _, p, _ in model.parameters():
        p += 0.05 * rng.normal(size=p.shape)
    return model, x_num, x_cat, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
