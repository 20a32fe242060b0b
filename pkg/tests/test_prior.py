"""Vertex label prior: counting, normalization, cleaning, aggregation."""

import numpy as np
import pytest
import torch

from dsr.body import BodyParams, DTYPE, forward
from dsr.fixtures import random_params, vertex_fine_labels
from dsr.humanoid import HEAD, LEFT_ARM, LEFT_LEG, PART_NAMES, build_humanoid
from dsr.prior import (
    COARSE_SCHEME,
    LABEL_NAMES,
    MC_SCHEME,
    NUM_LABELS,
    ScanObservation,
    VertexLabelPrior,
    accumulate_counts,
    aggregate_labels,
    build_prior,
    clean_with_part_segmentation,
    coarse_vertex_probability,
    label_index,
    mc_vertex_probability,
    normalize_counts,
)
from dsr.raster import RasterConfig, mesh_to_screen, rasterize_hard

from reference import count_reference


def _small_observation(small_template, rng, size=24):
    params = random_params(rng)
    mesh = forward(small_template, params)
    labels = vertex_fine_labels(small_template)
    # paint each pixel with the max-probability corner's label via a quick
    # hard pass, mirroring how scan annotations are produced
    from dsr.fixtures import pixel_labels_from_hard
    verts2d, z = mesh_to_screen(mesh.vertices, params.camera)
    hard = rasterize_hard(verts2d, z, small_template.faces, size, size)
    img = pixel_labels_from_hard(hard, small_template.faces.numpy(), labels)
    return ScanObservation(mesh.vertices.numpy(), small_template.faces.numpy(),
                           params.camera.numpy(), img), hard


def test_accumulate_counts_matches_pixel_loop(small_template, rng):
    obs, hard = _small_observation(small_template, rng)
    counts = np.zeros((len(obs.vertices), NUM_LABELS), dtype=np.int64)
    accumulate_counts(obs, counts)
    want = count_reference(hard.face_index.numpy(), obs.faces, obs.label_image,
                           len(obs.vertices), NUM_LABELS)
    assert np.array_equal(counts, want)
    assert counts.sum() == 3 * (hard.face_index.numpy() >= 0).sum()


def test_accumulate_counts_validates_buffer(small_template, rng):
    obs, _ = _small_observation(small_template, rng)
    with pytest.raises(ValueError):
        accumulate_counts(obs, np.zeros((5, NUM_LABELS), dtype=np.int64))
    with pytest.raises(ValueError):
        accumulate_counts(obs, np.zeros((len(obs.vertices), NUM_LABELS)))


def test_normalize_counts_rows_sum_to_one(rng):
    counts = rng.integers(0, 50, size=(40, NUM_LABELS)).astype(np.int64)
    prior = normalize_counts(counts, eps_bg=0.05)
    assert np.abs(prior.probs.sum(axis=1) - 1.0).max() < 1e-12
    assert np.allclose(prior.probs[:, 0], 0.05)


def test_normalize_counts_garment_ratio_excludes_background():
    counts = np.zeros((1, NUM_LABELS), dtype=np.int64)
    counts[0, 0] = 1000          # background evidence must not dilute garments
    counts[0, 5] = 30
    counts[0, 9] = 10
    prior = normalize_counts(counts, eps_bg=0.2)
    assert prior.probs[0, 5] == pytest.approx(0.75 * 0.8)
    assert prior.probs[0, 9] == pytest.approx(0.25 * 0.8)
    assert prior.probs[0, 0] == pytest.approx(0.2)


def test_normalize_counts_zero_evidence_row_is_uniform():
    counts = np.zeros((2, NUM_LABELS), dtype=np.int64)
    counts[1, 5] = 4
    prior = normalize_counts(counts, eps_bg=0.05)
    garment = prior.probs[0, 1:]
    assert np.allclose(garment, 0.95 / (NUM_LABELS - 1))
    with pytest.raises(ValueError):
        normalize_counts(counts, eps_bg=0.6)


def test_cleaning_zeroes_forbidden_labels_and_rescales():
    probs = np.zeros((1, NUM_LABELS))
    probs[0, 0] = 0.05
    probs[0, label_index("LeftArm")] = 0.3
    probs[0, label_index("Pants")] = 0.65
    prior = VertexLabelPrior(probs, LABEL_NAMES, 0.05)
    cleaned = clean_with_part_segmentation(prior, np.array([LEFT_LEG]),
                                           part_names=PART_NAMES)
    assert cleaned.probs[0, label_index("LeftArm")] == 0.0
    assert cleaned.probs[0, label_index("Pants")] == pytest.approx(0.95)
    assert cleaned.probs[0, 0] == pytest.approx(0.05)


def test_cleaning_dead_row_becomes_uniform_over_allowed():
    probs = np.zeros((1, NUM_LABELS))
    probs[0, 0] = 0.05
    probs[0, label_index("LeftArm")] = 0.95   # all mass forbidden on a head
    prior = VertexLabelPrior(probs, LABEL_NAMES, 0.05)
    with pytest.warns(UserWarning):
        cleaned = clean_with_part_segmentation(prior, np.array([HEAD]),
                                               part_names=PART_NAMES)
    row = cleaned.probs[0]
    assert row[label_index("LeftArm")] == 0.0
    assert row[0] == pytest.approx(0.05)
    allowed = row[1:][row[1:] > 0]
    assert np.allclose(allowed, allowed[0])
    assert row.sum() == pytest.approx(1.0)


def test_cleaning_preserves_row_sums(small_template, rng):
    counts = rng.integers(0, 9, size=(small_template.num_vertices,
                                      NUM_LABELS)).astype(np.int64)
    prior = normalize_counts(counts, eps_bg=0.05)
    cleaned = clean_with_part_segmentation(
        prior, small_template.part_labels.numpy(), part_names=PART_NAMES)
    assert np.abs(cleaned.probs.sum(axis=1) - 1.0).max() < 1e-12
    arm = label_index("LeftArm")
    legs = np.isin(small_template.part_labels.numpy(), [LEFT_LEG, LEFT_LEG + 1])
    assert cleaned.probs[legs, arm].max() == 0.0


def test_aggregation_conserves_mass(rng):
    counts = rng.integers(0, 30, size=(25, NUM_LABELS)).astype(np.int64)
    prior = normalize_counts(counts, eps_bg=0.05)
    for scheme in (COARSE_SCHEME, MC_SCHEME):
        agg = aggregate_labels(prior, scheme)
        assert agg.shape == (25, len(scheme))
        assert np.abs(agg.sum(axis=1) - 1.0).max() < 1e-12
    mc = mc_vertex_probability(prior)
    names = [label_index(n) for n in MC_SCHEME["MinimalBody"]]
    assert np.allclose(mc, prior.probs[:, names].sum(axis=1), atol=1e-15)
    coarse = coarse_vertex_probability(prior)
    assert coarse.shape == (25, 4)


def test_aggregation_rejects_non_partition(rng):
    prior = normalize_counts(np.zeros((3, NUM_LABELS), dtype=np.int64), 0.05)
    with pytest.raises(ValueError):
        aggregate_labels(prior, {"Everything": LABEL_NAMES[:-1]})


def test_prior_validation():
    bad = np.full((2, NUM_LABELS), 1.0 / NUM_LABELS)
    bad[0, 3] += 0.5
    with pytest.raises(ValueError):
        VertexLabelPrior(bad, LABEL_NAMES, 0.05)
    with pytest.raises(ValueError):
        VertexLabelPrior(np.zeros((2, 4)), LABEL_NAMES, 0.05)


def test_scan_observation_validation(rng):
    verts = rng.normal(size=(4, 3))
    faces = np.array([[0, 1, 2]])
    cam = np.array([1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        ScanObservation(verts, faces, cam, np.full((4, 4), 30, dtype=np.uint8))
    with pytest.raises(ValueError):
        ScanObservation(verts, faces, cam, np.zeros(16, dtype=np.uint8))
    bad = verts.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        ScanObservation(bad, faces, cam, np.zeros((4, 4), dtype=np.uint8))


def test_build_prior_over_synthetic_scans(small_template, rng):
    observations = [_small_observation(small_template, rng)[0] for _ in range(3)]
    prior, counts = build_prior(iter(observations), small_template.num_vertices,
                                eps_bg=0.05)
    assert prior.probs.shape == (small_template.num_vertices, NUM_LABELS)
    assert np.abs(prior.probs.sum(axis=1) - 1.0).max() < 1e-6
    assert counts.dtype == np.int64
    assert counts.sum() > 0
    with pytest.raises(ValueError):
        build_prior(iter(observations), small_template.num_vertices + 1)
