"""Training losses and evaluation metrics for disparity regression.

Stage 1 trains the coarse full-resolution prediction with a smooth-L1 data
term plus squared-weight decay; stage 2 adds the refined prediction and a
Manhattan-distance term on the small-scale prediction.  Per-pixel
reductions are means over valid pixels, so the loss coefficients do not
depend on image resolution.  Ground-truth pixels that are non-finite or
negative are treated as invalid and excluded from losses and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import (
    ContractViolation,
    Tensor,
    absolute,
    accumulate_grad,
    add,
    graph_out,
    mul,
    scale,
    scalar,
    sub,
    sum_all,
)


@dataclass
class LossConfig:
    """alpha1: stage-1 weight decay; alpha2: small-map term weight in
    stage 2; beta2: stage-2 weight decay.  All must be >= 0."""

    alpha1: float = 1e-4
    alpha2: float = 0.5
    beta2: float = 1e-4

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta2"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")


def smooth_l1(x: Tensor) -> Tensor:
    """0.5*x^2 for |x| < 1, |x| - 0.5 otherwise.

    Continuous with continuous first derivative at |x| = 1; the derivative
    is x inside the quadratic region and sign(x) outside.
    """
    a = np.abs(x.data)
    quad = a < 1
    out = np.where(quad, x.dtype.type(0.5) * x.data * x.data, a - x.dtype.type(0.5))
    deriv = np.where(quad, x.data, np.sign(x.data))

    def bwd(g):
        accumulate_grad(x, g * deriv)

    return graph_out(out, (x,), bwd)


def valid_mask(gt: np.ndarray) -> np.ndarray:
    """Pixels eligible for losses/metrics: finite and non-negative."""
    return np.isfinite(gt) & (gt >= 0)


def _as_target(pred: Tensor, gt: np.ndarray, what: str):
    """Normalize gt to the prediction's (N, 1, H, W) layout.

    Returns (target tensor with invalid pixels zeroed, mask tensor,
    valid-pixel count).  Accepts (H, W), (N, H, W) or (N, 1, H, W) arrays.
    """
    arr = np.asarray(gt, dtype=pred.data.dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ContractViolation(f"{what} ground truth has shape {np.shape(gt)}")
    if arr.shape[0] == 1 and pred.shape[0] > 1:
        arr = np.broadcast_to(arr, (pred.shape[0],) + arr.shape[1:]).copy()
    if arr.shape != pred.shape:
        raise ContractViolation(
            f"{what} shape mismatch: prediction {tuple(pred.shape)} vs "
            f"ground truth {arr.shape}"
        )
    mask = valid_mask(arr)
    count = int(mask.sum())
    if count == 0:
        raise ContractViolation(f"{what} has zero valid ground-truth pixels")
    target = np.where(mask, arr, 0)
    return Tensor(target), Tensor(mask.astype(pred.data.dtype)), count


def _masked_mean(err: Tensor, mask: Tensor, count: int) -> Tensor:
    return scale(sum_all(mul(err, mask)), 1.0 / count)


def weight_decay(weights) -> Tensor:
    """Sum of squared values over the given weight tensors (biases are the
    caller's business; by convention they are excluded)."""
    weights = list(weights)
    if not weights:
        return scalar(0.0)
    total = None
    for w in weights:
        sq = sum_all(mul(w, w))
        total = sq if total is None else add(total, sq)
    return total


def loss1(p_c: Tensor, gt: np.ndarray, weights, cfg: LossConfig) -> Tensor:
    """Coarse-stage loss: masked mean smooth-L1 plus alpha1 * sum(w^2)."""
    target, mask, count = _as_target(p_c, gt, "loss1")
    data_term = _masked_mean(smooth_l1(sub(p_c, target)), mask, count)
    if cfg.alpha1 == 0:
        return data_term
    return add(data_term, scale(_cast(weight_decay(weights), p_c), cfg.alpha1))


def loss2(p_f: Tensor, gt: np.ndarray, p_s: Tensor, gt_small: np.ndarray,
          weights, cfg: LossConfig) -> Tensor:
    """Refine-stage loss: mean smooth-L1 on the final prediction, plus
    alpha2 * mean |p_s - T_s| on the small map, plus beta2 * sum(w^2).

    `gt_small` must already be in small-map pixel units (resized with the
    nearest-neighbor disparity rule)."""
    target_f, mask_f, count_f = _as_target(p_f, gt, "loss2 final")
    target_s, mask_s, count_s = _as_target(p_s, gt_small, "loss2 small")
    total = _masked_mean(smooth_l1(sub(p_f, target_f)), mask_f, count_f)
    small = _masked_mean(absolute(sub(p_s, target_s)), mask_s, count_s)
    total = add(total, scale(small, cfg.alpha2))
    if cfg.beta2 != 0:
        total = add(total, scale(_cast(weight_decay(weights), p_f), cfg.beta2))
    return total


def _cast(t: Tensor, like: Tensor) -> Tensor:
    if t.data.dtype == like.data.dtype:
        return t
    # Mixed dtypes only occur in ad-hoc checks; keep the graph intact.
    raise ContractViolation(
        f"loss dtype mismatch: weights are {t.data.dtype}, predictions are "
        f"{like.data.dtype}"
    )


# ---------------------------------------------------------------------------
# metrics (plain arrays, no gradients)
# ---------------------------------------------------------------------------

def _metric_inputs(pred: np.ndarray, gt: np.ndarray, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt_arr = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt_arr.shape:
        raise ContractViolation(
            f"metric shape mismatch: {pred.shape} vs {gt_arr.shape}"
        )
    m = valid_mask(gt_arr) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != gt_arr.shape:
        raise ContractViolation(f"mask shape {m.shape} does not match {gt_arr.shape}")
    if not m.any():
        raise ContractViolation("metric mask selects zero pixels")
    return np.abs(pred - gt_arr)[m]


def epe(pred: np.ndarray, gt: np.ndarray, mask=None) -> float:
    """End-point error: mean absolute disparity error over masked pixels."""
    return float(_metric_inputs(pred, gt, mask).mean())


def d1_rate(pred: np.ndarray, gt: np.ndarray, mask=None,
            threshold: float = 3.0) -> float:
    """Fraction of masked pixels with error > threshold, in [0, 1].

    Tables report this value multiplied by 100."""
    err = _metric_inputs(pred, gt, mask)
    return float((err > threshold).mean())
