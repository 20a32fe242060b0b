"""Pseudo-ground-truth mask preparation.

Raw 20-class label images are keypoint-cropped, small unreliable classes are
dropped, and the result is reduced to the two supervision targets: a binary
union mask over the five reliable body classes and a 4-class coarse mask.
All steps are pure, deterministic, and idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dsr.prior import (
    BACKGROUND,
    COARSE_SCHEME,
    LABEL_NAMES,
    MC_LABEL_NAMES,
    NUM_LABELS,
    label_index,
)

KEYPOINT_OFFSET_PX = 30
MIN_LABEL_PIXELS = 60

# fine id -> coarse id lookup, total on [0, 19]
COARSE_LOOKUP = np.zeros(NUM_LABELS, dtype=np.uint8)
for _coarse_id, _names in enumerate(COARSE_SCHEME.values()):
    for _n in _names:
        COARSE_LOOKUP[label_index(_n)] = _coarse_id
COARSE_NAMES = tuple(COARSE_SCHEME.keys())

_MC_IDS = tuple(label_index(n) for n in MC_LABEL_NAMES)


@dataclass
class SampleTargets:
    """Per-sample supervision targets and bookkeeping."""

    valid: bool
    crop: tuple[int, int, int, int] | None      # x0, y0, x1, y1 inclusive
    valid_mc_labels: tuple[str, ...]
    mc_mask: np.ndarray | None                  # (H, W) uint8 in {0, 1}
    c_mask: np.ndarray | None                   # (H, W) uint8 in {0..3}

    def meta(self) -> dict:
        return {
            "crop": list(self.crop) if self.crop is not None else None,
            "skip_c": self.c_mask is None,
            "skip_mc": self.mc_mask is None,
            "valid": self.valid,
            "valid_mc_labels": list(self.valid_mc_labels),
        }


def _check_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("label image must be non-empty 2-D")
    if arr.min() < 0 or arr.max() >= NUM_LABELS:
        raise ValueError(f"label ids must lie in [0, {NUM_LABELS - 1}]")
    return arr.astype(np.uint8)


def crop_by_keypoints(labels, keypoints, offset: int = KEYPOINT_OFFSET_PX
                      ) -> tuple[np.ndarray, tuple[int, int, int, int] | None]:
    """Mask out everything beyond the keypoint bounding box grown by `offset`.

    Keypoint rows are [x, y, confidence]; only confidence > 0 rows count.
    Returns (labels with outside pixels set to Background, crop rect) or
    (unchanged copy, None) when no keypoint is confident. Image size never
    changes.
    """
    arr = _check_labels(labels)
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 3:
        raise ValueError("keypoints must be (K, 3) rows of [x, y, confidence]")
    height, width = arr.shape
    conf = kp[:, 2] > 0
    if not conf.any():
        return arr.copy(), None
    xs, ys = kp[conf, 0], kp[conf, 1]
    x0 = max(int(np.floor(xs.min())) - offset, 0)
    y0 = max(int(np.floor(ys.min())) - offset, 0)
    x1 = min(int(np.ceil(xs.max())) + offset, width - 1)
    y1 = min(int(np.ceil(ys.max())) + offset, height - 1)
    out = np.full_like(arr, BACKGROUND)
    out[y0:y1 + 1, x0:x1 + 1] = arr[y0:y1 + 1, x0:x1 + 1]
    return out, (x0, y0, x1, y1)


def filter_small_labels(labels, min_pixels: int = MIN_LABEL_PIXELS) -> tuple[str, ...]:
    """Names of binary-target classes covering at least min_pixels (inclusive)."""
    arr = _check_labels(labels)
    hist = np.bincount(arr.reshape(-1), minlength=NUM_LABELS)
    return tuple(n for n, i in zip(MC_LABEL_NAMES, _MC_IDS) if hist[i] >= min_pixels)


def build_mc_target(labels, valid_mc_labels) -> np.ndarray:
    """Binary union mask of the given class names."""
    arr = _check_labels(labels)
    ids = [label_index(n) for n in valid_mc_labels]
    if not ids:
        raise ValueError("valid_mc_labels must be nonempty")
    return np.isin(arr, ids).astype(np.uint8)


def build_c_target(labels) -> np.ndarray:
    """Fine 20-class image -> 4-class coarse image by table lookup."""
    return COARSE_LOOKUP[_check_labels(labels)]


def process_sample(labels, keypoints, offset: int = KEYPOINT_OFFSET_PX,
                   min_pixels: int = MIN_LABEL_PIXELS) -> SampleTargets:
    """Full pipeline: crop, filter, build both targets.

    A sample without confident keypoints is invalid (no targets at all); a
    cropped sample where no binary class survives the size filter gets a
    coarse target but no binary target.
    """
    cropped, crop = crop_by_keypoints(labels, keypoints, offset)
    if crop is None:
        return SampleTargets(valid=False, crop=None, valid_mc_labels=(),
                             mc_mask=None, c_mask=None)
    valid_names = filter_small_labels(cropped, min_pixels)
    mc = build_mc_target(cropped, valid_names) if valid_names else None
    return SampleTargets(valid=True, crop=crop, valid_mc_labels=valid_names,
                         mc_mask=mc, c_mask=build_c_target(cropped))
