"""Losses over soft renders, keypoints, and parameters.

Image-domain losses return (value, valid). `valid` is False when the term is
undefined for the given inputs (empty target, empty render, empty scoring
domain); callers skip invalid terms entirely rather than adding zeros, so a
skipped term leaves no trace in gradients or logs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from torch import Tensor

from dsr.body import DTYPE, rodrigues

_EMPTY = 1e-12
PROB_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Non-negative term weights for the combined objective."""

    w_2d: float = 1.0
    w_3d: float = 1.0
    w_theta: float = 1.0
    w_mc: float = 0.01
    w_c: float = 0.01

    def __post_init__(self) -> None:
        for name in ("w_2d", "w_3d", "w_theta", "w_mc", "w_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class DistanceField:
    """Exact Euclidean distance (pixels) to the nearest mask pixel.

    d is zero on mask pixels. For an empty mask every entry is the image
    diagonal and `valid` is False so callers can skip the sample.
    """

    d: np.ndarray
    source_mask: np.ndarray
    valid: bool


def distance_transform(mask) -> DistanceField:
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not m.any():
        diag = math.hypot(m.shape[0], m.shape[1])
        return DistanceField(np.full(m.shape, diag), m, False)
    return DistanceField(ndimage.distance_transform_edt(~m).astype(np.float64), m, True)


def mask_distance_loss(coverage: Tensor, target: DistanceField | np.ndarray
                       ) -> tuple[Tensor, bool]:
    """Distance-weighted containment: sum(R * d) / sum(R)^(3/2).

    Exactly zero when all covered pixels lie inside the target support.
    Invalid when the target is empty or the render covers nothing.
    """
    cov = torch.as_tensor(coverage, dtype=DTYPE)
    field = target if isinstance(target, DistanceField) else distance_transform(target)
    if field.d.shape != tuple(cov.shape):
        raise ValueError("coverage and target shapes differ")
    if not field.valid:
        return torch.zeros((), dtype=DTYPE), False
    total = cov.sum()
    if float(total.detach()) <= _EMPTY:
        return torch.zeros((), dtype=DTYPE), False
    return (cov * torch.from_numpy(field.d)).sum() / total.pow(1.5), True


def soft_iou_loss(pred: Tensor, target) -> tuple[Tensor, bool]:
    """1 - soft intersection-over-union; zero iff pred equals a binary target.

    pred is expected in [0, 1]; values outside are clamped with a warning.
    Invalid when both images are empty (union is zero).
    """
    p = torch.as_tensor(pred, dtype=DTYPE)
    g = torch.as_tensor(np.asarray(target), dtype=DTYPE)
    if p.shape != g.shape:
        raise ValueError("pred and target shapes differ")
    with torch.no_grad():
        out_of_range = bool((p < 0.0).any() or (p > 1.0).any())
    if out_of_range:
        warnings.warn("soft_iou_loss: pred outside [0, 1], clamping", stacklevel=2)
        p = p.clamp(0.0, 1.0)
    inter = (p * g).sum()
    union = (p + g - p * g).sum()
    if float(union.detach()) <= _EMPTY:
        return torch.zeros((), dtype=DTYPE), False
    return 1.0 - inter / union, True


def label_nll_loss(channels: Tensor, target_labels, domain=None,
                   reduction: str = "mean") -> tuple[Tensor, bool]:
    """Per-pixel classification of rendered label channels.

    The C channels are logits: softmax across channels, probabilities floored
    at PROB_FLOOR, negative log of the target class, reduced over the scoring
    domain (all pixels when domain is None). Pixels whose target id falls
    outside [0, C) are excluded. Invalid when the domain ends up empty.
    """
    ch = torch.as_tensor(channels, dtype=DTYPE)
    if ch.ndim != 3:
        raise ValueError(f"channels must be (H, W, C), got {tuple(ch.shape)}")
    n_classes = ch.shape[2]
    labels = torch.as_tensor(np.asarray(target_labels), dtype=torch.int64)
    if labels.shape != ch.shape[:2]:
        raise ValueError("target_labels must be (H, W) matching channels")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    keep = (labels >= 0) & (labels < n_classes)
    if domain is not None:
        dom = torch.as_tensor(np.asarray(domain)).bool()
        if dom.shape != labels.shape:
            raise ValueError("domain must be (H, W)")
        keep &= dom
    if not bool(keep.any()):
        return torch.zeros((), dtype=DTYPE), False

    probs = torch.softmax(ch, dim=-1).clamp(min=PROB_FLOOR)
    safe_labels = torch.where(keep, labels, torch.zeros_like(labels))
    picked = probs.gather(-1, safe_labels[..., None])[..., 0]
    total = -torch.log(picked)[keep].sum()
    if reduction == "mean":
        total = total / keep.sum()
    return total, True


def _require_finite(name: str, *tensors) -> None:
    for t in tensors:
        if not bool(torch.isfinite(torch.as_tensor(t)).all()):
            raise ValueError(f"non-finite values in {name}")


def keypoint_loss_2d(pred_px: Tensor, target) -> Tensor:
    """Confidence-weighted mean squared pixel error.

    target rows are [x, y, confidence]; sum_j conf_j * ||pred_j - gt_j||^2 / J.
    """
    p = torch.as_tensor(pred_px, dtype=DTYPE)
    t = torch.as_tensor(np.asarray(target), dtype=DTYPE)
    if p.ndim != 2 or p.shape[1] != 2 or t.shape != (p.shape[0], 3):
        raise ValueError("pred must be (J, 2) and target (J, 3)")
    _require_finite("2-D keypoints", p, t)
    err = ((p - t[:, :2]) ** 2).sum(1)
    return (t[:, 2] * err).sum() / p.shape[0]


def keypoint_loss_3d(pred: Tensor, target, root: int = 0) -> Tensor:
    """Mean squared error of root-centered 3-D joints."""
    p = torch.as_tensor(pred, dtype=DTYPE)
    t = torch.as_tensor(np.asarray(target), dtype=DTYPE)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("pred and target must both be (J, 3)")
    _require_finite("3-D joints", p, t)
    return (((p - p[root]) - (t - t[root])) ** 2).sum() / p.shape[0]


def pose_shape_loss(theta: Tensor, theta_ref, beta: Tensor, beta_ref) -> Tensor:
    """Squared error on rotation matrices plus squared error on shape.

    Rotations are compared as 3x3 matrices (mean over all entries), which
    sidesteps axis-angle wraparound.
    """
    th = torch.as_tensor(theta, dtype=DTYPE).reshape(-1, 3)
    th_ref = torch.as_tensor(np.asarray(theta_ref), dtype=DTYPE).reshape(-1, 3)
    b = torch.as_tensor(beta, dtype=DTYPE)
    b_ref = torch.as_tensor(np.asarray(beta_ref), dtype=DTYPE)
    if th.shape != th_ref.shape or b.shape != b_ref.shape:
        raise ValueError("parameter shapes differ")
    _require_finite("pose/shape parameters", th, th_ref, b, b_ref)
    rot_err = ((rodrigues(th) - rodrigues(th_ref)) ** 2).mean()
    return rot_err + ((b - b_ref) ** 2).mean()


def supervision_losses(pred_joints2d: Tensor | None = None, gt_joints2d=None,
                       pred_joints3d: Tensor | None = None, gt_joints3d=None,
                       theta: Tensor | None = None, theta_ref=None,
                       beta: Tensor | None = None, beta_ref=None,
                       weights: LossWeights = LossWeights()) -> dict[str, Tensor]:
    """Keypoint/parameter supervision breakdown; absent targets contribute nothing.

    Returns a dict with the computed terms under "l2d"/"l3d"/"ltheta" and their
    weighted sum under "total".
    """
    out: dict[str, Tensor] = {}
    total = torch.zeros((), dtype=DTYPE)
    if gt_joints2d is not None:
        out["l2d"] = keypoint_loss_2d(pred_joints2d, gt_joints2d)
        total = total + weights.w_2d * out["l2d"]
    if gt_joints3d is not None:
        out["l3d"] = keypoint_loss_3d(pred_joints3d, gt_joints3d)
        total = total + weights.w_3d * out["l3d"]
    if theta_ref is not None:
        out["ltheta"] = pose_shape_loss(theta, theta_ref, beta, beta_ref)
        total = total + weights.w_theta * out["ltheta"]
    out["total"] = total
    return out


def total_loss(standard_total: Tensor,
               mc_term: tuple[Tensor, bool] | None = None,
               c_term: tuple[Tensor, bool] | None = None,
               weights: LossWeights = LossWeights(),
               iteration: int = 0, warmup: int = 0) -> Tensor:
    """Combine supervision and render-based terms.

    Render terms are gated: before `warmup` iterations, or when their weight
    is zero, or when flagged invalid, they contribute exactly nothing (callers
    should then not even compute them, and pass None).
    """
    if warmup < 0:
        raise ValueError("warmup must be non-negative")
    total = torch.as_tensor(standard_total, dtype=DTYPE)
    if iteration >= warmup:
        if mc_term is not None and mc_term[1] and weights.w_mc > 0:
            total = total + weights.w_mc * mc_term[0]
        if c_term is not None and c_term[1] and weights.w_c > 0:
            total = total + weights.w_c * c_term[0]
    return total
