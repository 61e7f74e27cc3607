"""Multi-objective grading, the mutation reward, and task accuracy metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateParentError(ArithmeticError):
    """Parent score is zero after shifting; the reward ratio is undefined."""


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    """Balance coefficient alpha and the target parameter budget."""

    alpha: float = 0.6
    target_params: int = 50_000

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.target_params < 1:
            raise ValueError("target_params must be >= 1")


@dataclass
class EvalResult:
    """Trained-model outcome: bounded accuracy, size, blended grade, metrics."""

    accuracy: float
    params: int
    grade: float
    metrics: dict = field(default_factory=dict)
    diverged: bool = False


def size_term(params: int, target: int) -> float:
    """Size factor (target/params)^r with r=0 at or under target, else r=1."""
    if params < 1 or target < 1:
        raise ValueError("params and target must be >= 1")
    if params <= target:
        return 1.0
    return target / params


def grade(accuracy: float, params: int, cfg: ObjectiveConfig) -> float:
    """Validation grade: alpha * accuracy + (1 - alpha) * size factor."""
    if not (0.0 <= accuracy <= 1.0):
        raise ValueError(f"accuracy must be in [0, 1], got {accuracy}")
    return cfg.alpha * accuracy + (1.0 - cfg.alpha) * size_term(params, cfg.target_params)


def mutation_reward(score_parent: float, score_child: float, params_child: int,
                    cfg: ObjectiveConfig, offset: float = 0.0) -> float:
    """Cheap pre-training reward for a mutated child.

    Blends the child/parent score ratio with the child's size factor.  Both
    scores are shifted by a run-constant `offset` chosen so the parent side is
    positive; a degenerate (-inf) child always gets -inf so it is never picked.
    """
    if not math.isfinite(score_parent):
        raise DegenerateParentError(f"parent score {score_parent} is not finite")
    if score_child == float("-inf"):
        return float("-inf")
    parent = score_parent + offset
    if parent == 0.0:
        raise DegenerateParentError("parent score is zero after shifting")
    ratio = (score_child + offset) / parent
    return cfg.alpha * ratio + (1.0 - cfg.alpha) * size_term(params_child, cfg.target_params)


# --- dense-regression (depth-style) metrics ----------------------------------


def depth_metrics(pred, gt, mask=None) -> dict:
    """Relative error, RMSE and ratio-threshold accuracies on positive targets."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("no pixels selected")
    p = pred[mask]
    g = gt[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on the mask")
    rel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.divide(g, p, out=np.full_like(g, np.inf),
                                            where=p != 0))
    out = {"rel": rel, "rmse": rmse}
    for i in (1, 2, 3):
        out[f"d{i}"] = float(np.mean(ratio < 1.25 ** i))
    return out


def seg_metrics(pred_labels, gt_labels, num_classes: int) -> dict:
    """Mean IoU over classes present in prediction or truth, plus pixel accuracy."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    if pred.shape != gt.shape:
        raise ValueError("label maps must have the same size")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError("labels must be < num_classes")
    confusion = np.bincount(
        gt.astype(np.int64) * num_classes + pred.astype(np.int64),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes)
    inter = np.diag(confusion).astype(np.float64)
    union = confusion.sum(0) + confusion.sum(1) - np.diag(confusion)
    present = union > 0
    iou = inter[present] / union[present]
    return {
        "miou": float(iou.mean()) if present.any() else 0.0,
        "pixacc": float(inter.sum() / confusion.sum()),
    }


# --- super-resolution metrics -------------------------------------------------

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _window_means(img: np.ndarray, win: int) -> np.ndarray:
    """Sliding uniform-window means over the trailing two axes (valid region)."""
    c = np.cumsum(np.cumsum(img, axis=-2, dtype=np.float64), axis=-1)
    c = np.pad(c, [(0, 0)] * (img.ndim - 2) + [(1, 0), (1, 0)])
    sums = (
        c[..., win:, win:]
        - c[..., :-win, win:]
        - c[..., win:, :-win]
        + c[..., :-win, :-win]
    )
    return sums / (win * win)


def sr_metrics(pred, gt, value_range: float = 1.0) -> dict:
    """PSNR over all elements and mean local SSIM (uniform windows)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return {"psnr": float("inf"), "ssim": 1.0}
    psnr = 10.0 * math.log10(value_range * value_range / mse)

    win = min(SSIM_WINDOW, pred.shape[-1], pred.shape[-2])
    c1 = (SSIM_K1 * value_range) ** 2
    c2 = (SSIM_K2 * value_range) ** 2
    mu_p = _window_means(pred, win)
    mu_g = _window_means(gt, win)
    var_p = _window_means(pred * pred, win) - mu_p * mu_p
    var_g = _window_means(gt * gt, win) - mu_g * mu_g
    cov = _window_means(pred * gt, win) - mu_p * mu_g
    ssim_map = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / (
        (mu_p * mu_p + mu_g * mu_g + c1) * (var_p + var_g + c2)
    )
    return {"psnr": psnr, "ssim": float(ssim_map.mean())}


def accuracy_of(task_kind: str, metrics: dict) -> float:
    """Bounded accuracy used by the grade: d1, mean IoU, or scaled PSNR."""
    if task_kind == "regress":
        return float(metrics["d1"])
    if task_kind == "classify":
        return float(metrics["miou"])
    if task_kind == "superres":
        psnr = metrics["psnr"]
        if psnr == float("inf"):
            return 1.0
        return float(min(max(psnr / 50.0, 0.0), 1.0))
    raise ValueError(f"unknown task kind {task_kind!r}")
