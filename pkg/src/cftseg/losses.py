"""Segmentation objective: pixel cross-entropy plus dice/focal mask supervision.

The mask terms act on per-category sigmoid probabilities of summed stage
logits; the pixel term is a softmax cross-entropy over categories. The
weighted total is ``ce + 2*dice + 5*focal`` and every component is built
from differentiable tensor ops so the whole breakdown backpropagates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .blocks import MaskLogits
from .errors import ShapeError
from .functional import bilinear_resize, log_softmax
from .tensor import Tensor, logsigmoid, neg, power, sigmoid

IGNORE_INDEX = 255
LAMBDA_DICE = 2.0
LAMBDA_FOCAL = 5.0

MASK_LOSS_MODES = ("cumulative", "final", "off")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components; total is the lambda-weighted sum."""

    ce: Tensor
    dice: Tensor
    focal: Tensor
    total: Tensor
    lambda_d: float = LAMBDA_DICE
    lambda_f: float = LAMBDA_FOCAL

    @classmethod
    def combine(cls, ce: Tensor, dice: Tensor, focal: Tensor) -> "LossBreakdown":
        total = ce + dice * LAMBDA_DICE + focal * LAMBDA_FOCAL
        return cls(ce=ce, dice=dice, focal=focal, total=total)

    def floats(self) -> dict[str, float]:
        return {"ce": self.ce.item(), "dice": self.dice.item(),
                "focal": self.focal.item(), "total": self.total.item()}


def _scalar_zero() -> Tensor:
    return Tensor(np.zeros(()))


def _check_labels(labels: np.ndarray, num_categories: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be an integer array")
    bad = (labels != IGNORE_INDEX) & ((labels < 0) | (labels >= num_categories))
    if bad.any():
        raise ValueError(
            f"labels must lie in [0, {num_categories}) or equal {IGNORE_INDEX}")
    return labels


def one_hot(labels: np.ndarray, num_categories: int) -> np.ndarray:
    """(B,H,W) indices -> (B,L,H,W) float one-hot; ignored pixels all-zero."""
    labels = _check_labels(labels, num_categories)
    flat = labels.reshape(-1)
    out = np.zeros((flat.size, num_categories))
    valid = flat != IGNORE_INDEX
    out[np.nonzero(valid)[0], flat[valid]] = 1.0
    out = out.reshape(*labels.shape, num_categories)
    return np.moveaxis(out, -1, 1) if labels.ndim == 3 else out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels."""
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy expects (B,L,H,W) logits, got {logits.shape}")
    b, num_categories, h, w = logits.shape
    labels = _check_labels(labels, num_categories)
    if labels.shape != (b, h, w):
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits.shape}")
    n_valid = int(np.count_nonzero(labels != IGNORE_INDEX))
    if n_valid == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    target = Tensor(one_hot(labels, num_categories))
    logp = log_softmax(logits, axis=1)
    return (logp * target).sum() * (-1.0 / n_valid)


def nearest_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Source index sampled at each destination cell's center."""
    centers = (np.arange(dst_len) + 0.5) * (src_len / dst_len)
    return np.minimum(centers.astype(np.int64), src_len - 1)


def build_mask_targets(labels: np.ndarray, num_categories: int,
                       out_h: int, out_w: int) -> np.ndarray:
    """Nearest-downsampled one-hot targets, (B,L,out_h,out_w)."""
    labels = _check_labels(labels, num_categories)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be (B,H,W), got {labels.shape}")
    rows = nearest_indices(labels.shape[1], out_h)
    cols = nearest_indices(labels.shape[2], out_w)
    small = labels[:, rows[:, None], cols[None, :]]
    return one_hot(small, num_categories)


def sum_masks_orderly(masks: Sequence[MaskLogits],
                      mode: str = "cumulative") -> list[Tensor]:
    """Resize stage mask logits to the finest grid and accumulate in order.

    Returns every running sum under ``cumulative`` supervision and only the
    last one under ``final``. Masks must be ordered coarse to fine, as the
    top-down pass emits them.
    """
    if mode not in ("cumulative", "final"):
        raise ValueError(f"unknown mask sum mode {mode!r}")
    if not masks:
        raise ValueError("sum_masks_orderly needs at least one mask")
    _, _, out_h, out_w = masks[-1].logits.shape
    resized = [bilinear_resize(m.logits, out_h, out_w) for m in masks]
    sums = [resized[0]]
    for r in resized[1:]:
        sums.append(sums[-1] + r)
    return sums if mode == "cumulative" else [sums[-1]]


def _as_batched(logits: Tensor, target: np.ndarray) -> tuple[Tensor, np.ndarray]:
    target = np.asarray(target, dtype=np.float64)
    if logits.ndim == 3:
        logits = logits.reshape((1, *logits.shape))
        target = target.reshape((1, *target.shape))
    if logits.ndim != 4 or target.shape != logits.shape:
        raise ShapeError(
            f"mask logits {logits.shape} and target {target.shape} must be "
            "matching (B,L,H,W) or (L,H,W) arrays")
    return logits, target


def dice_loss(mask_logits: Tensor, target: np.ndarray,
              smooth: float = 1.0) -> Tensor:
    """Soft dice on sigmoid probabilities, averaged over present categories.

    A category counts as present when its target plane has any positive
    pixel in that sample; an all-empty target yields a zero loss.
    """
    logits, target = _as_batched(mask_logits, target)
    probs = sigmoid(logits)
    tconst = Tensor(target)
    inter = (probs * tconst).sum(axis=(2, 3))
    psum = probs.sum(axis=(2, 3))
    tsum = target.sum(axis=(2, 3))
    present = (tsum > 0).astype(np.float64)
    n_present = present.sum()
    if n_present == 0:
        return _scalar_zero()
    per_pair = 1.0 - (inter * 2.0 + smooth) / (psum + Tensor(tsum) + smooth)
    return (per_pair * Tensor(present)).sum() * (1.0 / n_present)


def focal_loss(mask_logits: Tensor, target: np.ndarray,
               gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Binary focal loss on per-category sigmoid maps, mean over all pixels.

    Uses log-sigmoid throughout so saturated logits stay finite.
    """
    logits, target = _as_batched(mask_logits, target)
    t = target
    log_pt = Tensor(t) * logsigmoid(logits) + Tensor(1.0 - t) * logsigmoid(neg(logits))
    alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    weighted = Tensor(alpha_t) * neg(log_pt)
    if gamma != 0.0:
        pt_complement = Tensor(t) * sigmoid(neg(logits)) + Tensor(1.0 - t) * sigmoid(logits)
        weighted = weighted * power(pt_complement, gamma)
    return weighted.mean()


def total_loss(logits: Tensor, masks: Sequence[MaskLogits], labels: np.ndarray,
               mask_mode: str = "cumulative") -> LossBreakdown:
    """Compose the full objective: ce + 2*dice + 5*focal."""
    if mask_mode not in MASK_LOSS_MODES:
        raise ValueError(f"unknown mask loss mode {mask_mode!r}")
    ce = cross_entropy(logits, labels)
    if masks and mask_mode != "off":
        sums = sum_masks_orderly(masks, mode=mask_mode)
        _, num_categories, out_h, out_w = sums[0].shape
        target = build_mask_targets(labels, num_categories, out_h, out_w)
        dice_terms = [dice_loss(s, target) for s in sums]
        focal_terms = [focal_loss(s, target) for s in sums]
        dice = reduce(lambda a, b: a + b, dice_terms) * (1.0 / len(sums))
        focal = reduce(lambda a, b: a + b, focal_terms) * (1.0 / len(sums))
    else:
        dice = _scalar_zero()
        focal = _scalar_zero()
    return LossBreakdown.combine(ce, dice, focal)
