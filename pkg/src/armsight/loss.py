"""The four training objectives and their weighted combination.

The mask objective is a class-rebalanced binary cross-entropy: foreground and
background weights are the inverse class probabilities of the ground-truth
mask, so sparse robot pixels are not drowned out by background. Note the
published form of the per-pixel term puts the binary ground truth inside the
log, which is undefined for hard 0/1 labels; this implementation uses the
standard weighted cross-entropy reading with the estimate inside the log:

    l = -w_fg * g * log(p) - w_bg * (1 - g) * log(1 - p)

Coordinate objectives are mean Euclidean distances in meters, the type
objective is categorical cross-entropy, and the final loss is their weighted
sum. Batch losses are means over the batch, so values are comparable across
batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch

LOG_CLAMP = 1e-7
_ZERO_DIST = 1e-12


class DegenerateMask(ValueError):
    """Mask with only one class; inverse-probability weights undefined."""


class BadLabel(ValueError):
    """Class label outside the predicted distribution's support."""


@dataclass(frozen=True)
class LossWeights:
    w_mask: float = 1.0
    w_jcoords: float = 1.5
    w_bcoords: float = 1.5
    w_type: float = 0.3

    def __post_init__(self):
        if min(self.w_mask, self.w_jcoords, self.w_bcoords, self.w_type) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    mask: float
    jcoords: float
    bcoords: float
    type: float
    final: float


def fg_bg_weights(gt_mask: np.ndarray) -> tuple[float, float]:
    """Inverse class-probability weights (w_fg, w_bg) of a binary mask."""
    g = np.asarray(gt_mask)
    total = g.size
    fg = float(np.count_nonzero(g))
    if fg == 0 or fg == total:
        raise DegenerateMask("mask must contain both foreground and background")
    return total / fg, total / (total - fg)


def _check_mask_shapes(est, gt):
    if est.shape != gt.shape:
        raise ShapeMismatch(f"mask est {est.shape} vs gt {gt.shape}")


def mask_loss(est_probs: np.ndarray, gt_mask: np.ndarray,
              weights: tuple[float, float] | None = None) -> float:
    """Weighted BCE averaged over all pixels (and batch, if batched).

    `weights` overrides the (w_fg, w_bg) pair; by default they come from
    `gt_mask` itself, so batched calls weight by the batch's own class mix.
    """
    value, _ = mask_loss_grad(est_probs, gt_mask, weights)
    return value


def mask_loss_grad(est_probs: np.ndarray, gt_mask: np.ndarray,
                   weights: tuple[float, float] | None = None):
    est = np.asarray(est_probs, dtype=float)
    g = np.asarray(gt_mask, dtype=float)
    _check_mask_shapes(est, g)
    w_fg, w_bg = weights if weights is not None else fg_bg_weights(g)
    p = np.clip(est, LOG_CLAMP, 1.0 - LOG_CLAMP)
    n = g.size
    per_pixel = -w_fg * g * np.log(p) - w_bg * (1.0 - g) * np.log1p(-p)
    value = float(per_pixel.sum() / n)
    grad = (-w_fg * g / p + w_bg * (1.0 - g) / (1.0 - p)) / n
    grad *= (est > LOG_CLAMP) & (est < 1.0 - LOG_CLAMP)
    return value, grad


def joint_loss(est: np.ndarray, gt: np.ndarray, n_joints: int) -> float:
    """Per-sample mean joint distance, averaged over the batch. Meters."""
    value, _ = joint_loss_grad(est, gt, n_joints)
    return value


def joint_loss_grad(est: np.ndarray, gt: np.ndarray, n_joints: int):
    e = np.asarray(est, dtype=float)
    g = np.asarray(gt, dtype=float)
    if e.shape != g.shape or e.shape[-1] != 3 * n_joints:
        raise ShapeMismatch(f"joint arrays {e.shape} vs {g.shape}, n_joints={n_joints}")
    batched = e.ndim == 2
    ev = e.reshape(-1, n_joints, 3)
    gv = g.reshape(-1, n_joints, 3)
    diff = ev - gv
    dist = np.sqrt((diff * diff).sum(axis=-1))
    b = ev.shape[0]
    value = float(dist.sum() / (n_joints * b))
    safe = np.where(dist > _ZERO_DIST, dist, 1.0)
    grad = diff / safe[..., None] * (dist > _ZERO_DIST)[..., None] / (n_joints * b)
    return value, grad.reshape(e.shape if batched else (3 * n_joints,))


def base_loss(est: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance between estimated and true base positions. Meters."""
    value, _ = base_loss_grad(est, gt)
    return value


def base_loss_grad(est: np.ndarray, gt: np.ndarray):
    e = np.asarray(est, dtype=float)
    g = np.asarray(gt, dtype=float)
    if e.shape != g.shape or e.shape[-1] != 3:
        raise ShapeMismatch(f"base arrays {e.shape} vs {g.shape}")
    value, grad = joint_loss_grad(e, g, 1)
    return value, grad


def type_loss(pred_probs: np.ndarray, gt_labels: np.ndarray) -> float:
    """Categorical cross-entropy against integer labels, batch mean."""
    value, _ = type_loss_grad(pred_probs, gt_labels)
    return value


def type_loss_grad(pred_probs: np.ndarray, gt_labels: np.ndarray):
    p = np.asarray(pred_probs, dtype=float)
    labels = np.asarray(gt_labels)
    if p.ndim == 1:
        p = p[None, :]
        labels = np.atleast_1d(labels)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise ShapeMismatch(f"probs {pred_probs.shape} vs labels {gt_labels.shape}")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ShapeMismatch("rows of pred_probs must sum to 1")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise BadLabel(f"labels must lie in [0, {p.shape[1]})")
    b = p.shape[0]
    picked = p[np.arange(b), labels]
    clamped = np.maximum(picked, LOG_CLAMP)
    value = float(-np.log(clamped).sum() / b)
    grad = np.zeros_like(p)
    grad[np.arange(b), labels] = -1.0 / clamped * (picked > LOG_CLAMP) / b
    return value, grad.reshape(np.asarray(pred_probs, dtype=float).shape)


def combined_loss(mask: float, jcoords: float, bcoords: float, type: float,
                  weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the four component losses."""
    final = (weights.w_mask * mask + weights.w_jcoords * jcoords
             + weights.w_bcoords * bcoords + weights.w_type * type)
    return LossBreakdown(mask=mask, jcoords=jcoords, bcoords=bcoords, type=type, final=final)
