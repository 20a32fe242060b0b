"""Mask preprocessing: keypoint crops, size filtering, target images."""

import numpy as np
import pytest

from dsr.masks import (
    COARSE_LOOKUP,
    COARSE_NAMES,
    build_c_target,
    build_mc_target,
    crop_by_keypoints,
    filter_small_labels,
    process_sample,
)
from dsr.prior import COARSE_SCHEME, LABEL_NAMES, MC_LABEL_NAMES, label_index


def kp(*points):
    return np.array([[x, y, c] for x, y, c in points], dtype=np.float64)


def test_crop_keeps_box_and_zeroes_outside():
    labels = np.full((100, 120), label_index("Pants"), dtype=np.uint8)
    out, crop = crop_by_keypoints(labels, kp((50, 40, 1.0), (60, 45, 1.0)),
                                  offset=10)
    assert crop == (40, 30, 70, 55)
    assert out.shape == labels.shape
    assert (out[30:56, 40:71] == label_index("Pants")).all()
    assert out[29, 50] == 0 and out[56, 50] == 0
    assert out[40, 39] == 0 and out[40, 71] == 0


def test_crop_clips_at_image_border():
    labels = np.ones((20, 20), dtype=np.uint8)
    out, crop = crop_by_keypoints(labels, kp((2, 2, 1.0)), offset=30)
    assert crop == (0, 0, 19, 19)
    assert (out == labels).all()


def test_crop_ignores_zero_confidence_points():
    labels = np.ones((50, 50), dtype=np.uint8)
    points = kp((5, 5, 0.0), (25, 25, 1.0))
    _, crop = crop_by_keypoints(labels, points, offset=5)
    assert crop == (20, 20, 30, 30)
    out, crop = crop_by_keypoints(labels, kp((5, 5, 0.0)), offset=5)
    assert crop is None
    assert (out == labels).all()


def test_crop_uses_floor_and_ceil_on_fractional_coordinates():
    labels = np.ones((64, 64), dtype=np.uint8)
    _, crop = crop_by_keypoints(labels, kp((10.4, 20.6, 1.0)), offset=2)
    assert crop == (8, 18, 13, 23)


def test_filter_small_labels_threshold_is_inclusive():
    labels = np.zeros((30, 30), dtype=np.uint8)
    labels[:6, :10] = label_index("Face")       # exactly 60 pixels
    labels[0, 10:15] = label_index("LeftArm")   # 5 pixels, dropped
    labels[10:20, :8] = label_index("Pants")    # not a binary-target class
    assert filter_small_labels(labels, min_pixels=60) == ("Face",)
    assert filter_small_labels(labels, min_pixels=61) == ()
    assert "LeftArm" in filter_small_labels(labels, min_pixels=5)


def test_mc_target_is_union_of_named_classes():
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[0, 0] = label_index("LeftArm")
    labels[1, 1] = label_index("Face")
    labels[2, 2] = label_index("Pants")
    mask = build_mc_target(labels, ("LeftArm", "Face"))
    want = np.zeros((4, 4), dtype=np.uint8)
    want[0, 0] = want[1, 1] = 1
    assert np.array_equal(mask, want)
    with pytest.raises(ValueError):
        build_mc_target(labels, ())


def test_coarse_lookup_follows_scheme():
    for fine_id, name in enumerate(LABEL_NAMES):
        coarse = int(COARSE_LOOKUP[fine_id])
        assert name in COARSE_SCHEME[COARSE_NAMES[coarse]]
    labels = np.array([[label_index("Pants"), label_index("Dress")],
                       [label_index("Hat"), 0]], dtype=np.uint8)
    c = build_c_target(labels)
    assert c[0, 0] == COARSE_NAMES.index("LowerClothes")
    assert c[0, 1] == COARSE_NAMES.index("UpperClothes")
    assert c[1, 0] == COARSE_NAMES.index("MinimalClothing")
    assert c[1, 1] == 0


def test_process_sample_without_keypoints_is_invalid():
    labels = np.ones((40, 40), dtype=np.uint8)
    sample = process_sample(labels, kp((1, 1, 0.0)))
    assert not sample.valid
    assert sample.crop is None
    assert sample.mc_mask is None and sample.c_mask is None
    meta = sample.meta()
    assert meta["valid"] is False


def test_process_sample_builds_both_targets():
    labels = np.zeros((80, 80), dtype=np.uint8)
    labels[10:40, 10:40] = label_index("Face")
    labels[40:70, 10:40] = label_index("Pants")
    sample = process_sample(labels, kp((20, 20, 1.0), (30, 60, 0.9)),
                            offset=30, min_pixels=60)
    assert sample.valid
    assert sample.valid_mc_labels == ("Face",)
    assert sample.mc_mask is not None
    assert np.array_equal(sample.mc_mask == 1,
                          sample.c_mask == COARSE_NAMES.index("MinimalClothing"))
    assert sample.c_mask.shape == labels.shape


def test_process_sample_with_no_surviving_binary_class():
    labels = np.zeros((50, 50), dtype=np.uint8)
    labels[20:30, 20:30] = label_index("Pants")
    labels[20, 31] = label_index("Face")    # one pixel, under any sane threshold
    sample = process_sample(labels, kp((25, 25, 1.0)), min_pixels=60)
    assert sample.valid
    assert sample.valid_mc_labels == ()
    assert sample.mc_mask is None
    assert sample.c_mask is not None


def test_label_validation_rejects_bad_images():
    with pytest.raises(ValueError):
        crop_by_keypoints(np.zeros((4,), dtype=np.uint8), kp((1, 1, 1.0)))
    with pytest.raises(ValueError):
        crop_by_keypoints(np.full((4, 4), 25, dtype=np.uint8), kp((1, 1, 1.0)))
    with pytest.raises(ValueError):
        crop_by_keypoints(np.zeros((4, 4), dtype=np.uint8),
                          np.zeros((3, 2)))


def test_mc_label_names_are_a_subset_of_fine_labels():
    for name in MC_LABEL_NAMES:
        assert name in LABEL_NAMES
