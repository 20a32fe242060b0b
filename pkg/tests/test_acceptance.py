"""Release acceptance: nine numbered checks over the whole toolkit.

Each check exercises one shipping criterion end to end at its stated
tolerance. conftest prints a `criterion N: PASS|FAIL` line per check.
Check 7 runs twenty full fits and dominates the wall time of the suite.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import torch

from dsr.body import DTYPE
from dsr.cli import main
from dsr.fitting import FitSchedule, FitTargets, LossWeights, fit
from dsr.fixtures import one_hot_prior, pose_noise_experiment, vertex_fine_labels
from dsr.gradcheck import run_gradcheck
from dsr.humanoid import LEFT_LEG, TORSO
from dsr.losses import (
    distance_transform,
    label_nll_loss,
    mask_distance_loss,
    soft_iou_loss,
)
from dsr.masks import (
    build_c_target,
    build_mc_target,
    crop_by_keypoints,
    filter_small_labels,
    process_sample,
)
from dsr.prior import (
    COARSE_SCHEME,
    LABEL_NAMES,
    MC_SCHEME,
    NUM_LABELS,
    VertexLabelPrior,
    accumulate_counts,
    aggregate_labels,
    clean_with_part_segmentation,
    label_index,
    normalize_counts,
)
from dsr.raster import RasterConfig, rasterize_hard, rasterize_soft

from conftest import default_params, random_scene
from reference import (
    count_reference,
    distm_reference,
    edt_reference,
    hard_raster_reference,
    nll_reference,
    siou_reference,
    soft_raster_reference,
)
from test_fitting import _joints2d, _mask_targets
from test_prior import _small_observation


def test_criterion_1_gradients_match_finite_differences():
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        start = time.perf_counter()
        report = run_gradcheck(seed=0)
        wall = time.perf_counter() - start
    finally:
        torch.set_num_threads(old)
    assert report.passed
    named = {"raster-verts", "loss-distm", "loss-siou", "loss-nll", "chain"}
    assert named <= set(report.groups)
    for group, err in report.groups.items():
        assert err < 1e-4, (group, err)
    assert wall < 60.0


def test_criterion_2_rasterizer_matches_per_pixel_reference():
    rng = np.random.default_rng(20)
    for case in range(50):
        width = int(rng.integers(4, 33))
        height = int(rng.integers(4, 33))
        num_verts = int(rng.integers(4, 13))
        num_faces = int(rng.integers(1, 21))
        verts2d, z, faces = random_scene(rng, num_verts=num_verts,
                                         num_faces=num_faces)
        attrs = torch.tensor(rng.normal(size=(num_verts, int(rng.integers(1, 4)))))
        sigma = float(rng.choice([1e-2, 1e-3]))
        gamma = float(rng.choice([0.5, 0.2]))
        # exercise both execution paths; truncation at this tail stays far
        # below the comparison tolerance
        method = "sparse" if case % 2 else "dense"
        cfg = RasterConfig(sigma=sigma, gamma=gamma, tail_eps=1e-16)
        out = rasterize_soft(verts2d, z, faces, attrs, width, height, cfg,
                             method=method)
        img, sil = soft_raster_reference(verts2d, z, faces, attrs, width,
                                         height, sigma=sigma, gamma=gamma)
        assert np.abs(out.image.numpy() - img).max() < 1e-10, case
        assert np.abs(out.silhouette.numpy() - sil).max() < 1e-10, case

        hard = rasterize_hard(verts2d, z, faces, width, height)
        fi, depth, _ = hard_raster_reference(verts2d, z, faces, width, height)
        assert np.array_equal(hard.face_index.numpy(), fi), case
        assert np.abs(hard.depth.numpy() - depth).max() < 1e-12, case


def test_criterion_3_distance_transform_matches_brute_force():
    rng = np.random.default_rng(30)
    for _ in range(100):
        mask = rng.random((16, 16)) < rng.uniform(0.02, 0.9)
        if not mask.any():
            mask[rng.integers(16), rng.integers(16)] = True
        mask = mask.astype(np.uint8)
        field = distance_transform(mask)
        assert field.valid
        assert np.array_equal(field.d, edt_reference(mask))


def test_criterion_4_loss_values_match_scalar_oracles():
    rng = np.random.default_rng(40)
    for _ in range(5):
        mask = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        if not mask.any():
            mask[3, 4] = 1
        field = distance_transform(mask)
        coverage = torch.tensor(rng.uniform(size=(8, 8)))
        loss, valid = mask_distance_loss(coverage, field)
        assert valid
        assert abs(float(loss) - distm_reference(coverage.numpy(), field.d)) < 1e-12

        pred = torch.tensor(rng.uniform(size=(8, 8)))
        gt = (rng.random((8, 8)) < 0.5).astype(np.uint8)
        if not gt.any():
            gt[0, 0] = 1
        loss, valid = soft_iou_loss(pred, gt)
        assert valid
        assert abs(float(loss) - siou_reference(pred.numpy(), gt)) < 1e-12

        channels = torch.tensor(rng.uniform(size=(8, 8, 4)))
        labels = rng.integers(0, 4, size=(8, 8))
        domain = rng.random((8, 8)) < 0.7
        domain[0, 0] = True
        for reduction in ("mean", "sum"):
            loss, valid = label_nll_loss(channels, labels, domain=domain,
                                         reduction=reduction)
            assert valid
            want = nll_reference(channels.numpy(), labels, domain, reduction)
            assert abs(float(loss) - want) < 1e-12

    # fixed points of each loss
    inside = np.zeros((8, 8), dtype=np.uint8)
    inside[1:7, 1:7] = 1
    contained = torch.zeros(8, 8, dtype=DTYPE)
    contained[2:5, 2:5] = 0.6
    loss, valid = mask_distance_loss(contained, distance_transform(inside))
    assert valid and float(loss) == 0.0

    gt = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    gt[0, 0] = 1
    loss, valid = soft_iou_loss(torch.tensor(gt, dtype=DTYPE), gt)
    assert valid and float(loss) == 0.0

    uniform = torch.full((8, 8, 4), 0.37, dtype=DTYPE)
    loss, valid = label_nll_loss(uniform, np.zeros((8, 8), dtype=np.int64),
                                 domain=np.ones((8, 8), dtype=bool))
    assert valid
    assert abs(float(loss) - math.log(4.0)) < 1e-9


def test_criterion_5_prior_pipeline(small_template):
    rng = np.random.default_rng(50)
    counts = rng.integers(0, 40, size=(64, NUM_LABELS)).astype(np.int64)
    prior = normalize_counts(counts, eps_bg=0.05)
    assert np.abs(prior.probs.sum(axis=1) - 1.0).max() < 1e-6

    obs, hard = _small_observation(small_template, rng)
    buf = np.zeros((len(obs.vertices), NUM_LABELS), dtype=np.int64)
    accumulate_counts(obs, buf)
    want = count_reference(hard.face_index.numpy(), obs.faces, obs.label_image,
                           len(obs.vertices), NUM_LABELS)
    assert np.array_equal(buf, want)

    probs = rng.dirichlet(np.ones(NUM_LABELS), size=64)
    random_prior = VertexLabelPrior(probs, LABEL_NAMES, 0.05)
    for scheme in (COARSE_SCHEME, MC_SCHEME):
        agg = aggregate_labels(random_prior, scheme)
        for k, fine in enumerate(scheme.values()):
            cols = [label_index(n) for n in fine]
            assert np.abs(agg[:, k] - probs[:, cols].sum(axis=1)).max() < 1e-12
        assert np.abs(agg.sum(axis=1) - 1.0).max() < 1e-12

    # a leg vertex cannot carry arm labels: that mass moves to what remains,
    # background stays put
    rows = np.zeros((2, NUM_LABELS))
    rows[0, label_index("Background")] = 0.05
    rows[0, label_index("Pants")] = 0.65
    rows[0, label_index("LeftArm")] = 0.30
    rows[1, label_index("Background")] = 0.05
    rows[1, label_index("UpperClothes")] = 0.95
    fixture = VertexLabelPrior(rows, LABEL_NAMES, 0.05)
    cleaned = clean_with_part_segmentation(fixture, np.array([LEFT_LEG, TORSO]))
    leg = cleaned.probs[0]
    assert leg[label_index("LeftArm")] == 0.0
    assert abs(leg[label_index("Pants")] - 0.95) < 1e-12
    assert leg[label_index("Background")] == 0.05
    assert np.abs(cleaned.probs.sum(axis=1) - 1.0).max() < 1e-12
    assert np.array_equal(cleaned.probs[1], rows[1])


def test_criterion_6_mask_pipeline_reproduces_hand_computed_fixtures():
    face = label_index("Face")
    arm = label_index("LeftArm")
    pants = label_index("Pants")
    shoe = label_index("RightShoe")

    # 1: box arithmetic at the default 30 px offset
    labels = np.full((96, 96), pants, dtype=np.uint8)
    kp = np.array([[40.2, 35.7, 1.0], [52.9, 50.1, 0.9]])
    out, box = crop_by_keypoints(labels, kp)
    assert box == (10, 5, 83, 81)
    assert int((out == pants).sum()) == (83 - 10 + 1) * (81 - 5 + 1)
    assert out[4, 10] == 0 and out[5, 9] == 0
    assert out[82, 83] == 0 and out[81, 84] == 0
    assert out[5, 10] == pants and out[81, 83] == pants

    # 2: box clipped at the image border
    out, box = crop_by_keypoints(np.full((64, 64), face, dtype=np.uint8),
                                 np.array([[5.0, 8.0, 1.0]]))
    assert box == (0, 0, 35, 38)
    assert int((out == face).sum()) == 36 * 39

    # 3: no confident keypoint, image untouched, no box
    img = (np.arange(64, dtype=np.uint8) % NUM_LABELS).reshape(8, 8)
    out, box = crop_by_keypoints(img, np.array([[3.0, 3.0, 0.0]]))
    assert box is None
    assert np.array_equal(out, img)

    # 4: zero-confidence rows do not widen the box
    out, box = crop_by_keypoints(np.full((70, 70), arm, dtype=np.uint8),
                                 np.array([[10.0, 10.0, 0.0],
                                           [33.0, 40.0, 1.0]]))
    assert box == (3, 10, 63, 69)

    # 5: the 60 px class-size threshold is inclusive
    img = np.zeros((32, 32), dtype=np.uint8)
    img.reshape(-1)[:60] = arm
    assert filter_small_labels(img) == ("LeftArm",)
    img.reshape(-1)[59] = 0
    assert filter_small_labels(img) == ()

    # 6: several classes straddling the threshold
    img = np.zeros((40, 40), dtype=np.uint8)
    img.reshape(-1)[:60] = arm
    img.reshape(-1)[60:119] = shoe
    img.reshape(-1)[119:219] = face
    assert filter_small_labels(img) == ("LeftArm", "Face")

    # 7: fine to coarse lookup, every label id
    fine = np.arange(NUM_LABELS, dtype=np.uint8).reshape(4, 5)
    want = np.array([[0, 3, 3, 3, 3],
                     [2, 2, 2, 3, 1],
                     [2, 3, 1, 3, 3],
                     [3, 3, 3, 3, 3]], dtype=np.uint8)
    assert np.array_equal(build_c_target(fine), want)

    # 8: binary union covers exactly the named classes
    img = np.zeros((6, 6), dtype=np.uint8)
    img[0, :3] = arm
    img[1, :2] = face
    img[2, :4] = pants
    mc = build_mc_target(img, ("LeftArm", "Face"))
    want = np.zeros((6, 6), dtype=np.uint8)
    want[0, :3] = 1
    want[1, :2] = 1
    assert np.array_equal(mc, want)

    # 9: full pipeline with hand-derived targets
    img = np.zeros((64, 64), dtype=np.uint8)
    img[20:30, 20:30] = face        # 100 px inside the box
    img[0:2, 56:] = pants           # beyond x1 = 55, cropped away
    sample = process_sample(img, np.array([[25.0, 25.0, 1.0]]))
    assert sample.valid
    assert sample.crop == (0, 0, 55, 55)
    assert sample.valid_mc_labels == ("Face",)
    want_mc = np.zeros((64, 64), dtype=np.uint8)
    want_mc[20:30, 20:30] = 1
    assert np.array_equal(sample.mc_mask, want_mc)
    assert np.array_equal(sample.c_mask, want_mc * 3)
    assert sample.meta()["skip_mc"] is False

    # 10: cropping pushes the only class below threshold, binary target drops
    img = np.zeros((64, 64), dtype=np.uint8)
    img[20:27, 20:27] = arm         # 49 px inside
    img[60:, :30] = arm             # outside the box, does not count
    sample = process_sample(img, np.array([[23.0, 23.0, 1.0]]))
    assert sample.valid
    assert sample.crop == (0, 0, 53, 53)
    assert sample.mc_mask is None
    assert sample.c_mask is not None
    assert int(sample.c_mask.sum()) == 49 * 3


def test_criterion_7_render_losses_improve_noisy_pose_fits():
    old = torch.get_num_threads()
    torch.set_num_threads(4)
    try:
        start = time.perf_counter()
        out = pose_noise_experiment()
        wall = time.perf_counter() - start
    finally:
        torch.set_num_threads(old)
    assert out["count"] == 20
    assert out["median_pve_dsr"] < out["median_pve_joints"]
    assert out["wins"] >= 15
    assert wall < 300.0


def test_criterion_8_render_terms_are_gated_exactly(small_template):
    gt = default_params(theta=torch.full((72,), 0.08, dtype=DTYPE))
    init = default_params()
    kp = _joints2d(small_template, gt, 48, 48)
    mc, c = _mask_targets(small_template, gt, 48, 48)
    prior = one_hot_prior(vertex_fine_labels(small_template))
    with_masks = FitTargets(width=48, height=48, joints2d=kp,
                            mc_mask=mc, c_mask=c)
    without = FitTargets(width=48, height=48, joints2d=kp)

    # zero weights: bit-identical to a run with the render losses absent
    zero_w = FitSchedule(iterations=8, warmup=0,
                         weights=LossWeights(w_mc=0, w_c=0))
    a = fit(small_template, init, with_masks, prior=prior, schedule=zero_w)
    b = fit(small_template, init, without, schedule=zero_w)
    assert a.trace_jsonl() == b.trace_jsonl()
    assert torch.equal(a.params.theta, b.params.theta)
    assert torch.equal(a.params.beta, b.params.beta)
    assert torch.equal(a.params.camera, b.params.camera)

    # positive weights but warmup past the end: still bit-identical
    gated = FitSchedule(iterations=8, warmup=8,
                        weights=LossWeights(w_mc=0.02, w_c=0.02))
    c_run = fit(small_template, init, with_masks, prior=prior, schedule=gated)
    assert c_run.trace_jsonl() == b.trace_jsonl()

    # mid-run warmup: terms absent before, present after, prefix unchanged
    active = FitSchedule(iterations=8, warmup=4,
                         weights=LossWeights(w_mc=0.02, w_c=0.02))
    d_run = fit(small_template, init, with_masks, prior=prior, schedule=active)
    for record in d_run.trace:
        assert ("lmc" in record) == (record["iter"] >= 4)
        assert ("lc" in record) == (record["iter"] >= 4)
    assert d_run.trace[:4] == b.trace[:4]


def _cli(*argv) -> int:
    return main([str(a) for a in argv])


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_cli_runs_are_byte_deterministic(tmp_path, capsys):
    gradcheck_outputs = []
    for tag in ("one", "two"):
        base = tmp_path / tag
        fx = base / "fixtures"
        assert _cli("make-fixtures", "--out", fx, "--scans", 2, "--size", 48,
                    "--seed", 3) == 0
        assert _cli("build-prior", "--scans", fx / "scans",
                    "--out", base / "prior.dsrt", "--csv", base / "prior.csv") == 0
        masks = base / "masks"
        masks.mkdir(parents=True)
        assert _cli("clean-mask", "--mask", fx / "sample" / "labels.png",
                    "--keypoints", fx / "sample" / "keypoints.json",
                    "--out-dir", masks) == 0
        render = base / "render"
        render.mkdir()
        for mode in ("mc", "c", "hard"):
            assert _cli("render", "--template", fx / "template.dsrt",
                        "--params", fx / "sample" / "gt.json",
                        "--prior", base / "prior.dsrt", "--mode", mode,
                        "--width", 48, "--height", 48,
                        "--out", render / f"{mode}.pfm") == 0
        fit_dir = base / "fit"
        fit_dir.mkdir()
        fit_args = ["fit", "--template", fx / "template.dsrt",
                    "--init", fx / "sample" / "init.json",
                    "--joints", fx / "sample" / "keypoints.json",
                    "--c", masks / "labels.c.png",
                    "--prior", base / "prior.dsrt",
                    "--iters", 3, "--warmup", 0,
                    "--out", fit_dir / "result.json",
                    "--trace", fit_dir / "result.trace.jsonl"]
        if (masks / "labels.mc.png").exists():
            fit_args += ["--mc", masks / "labels.mc.png"]
        assert _cli(*fit_args) == 0

        capsys.readouterr()
        assert _cli("gradcheck", "--scale", 8, "--seed", 1) == 0
        gradcheck_outputs.append(capsys.readouterr().out)

    one = _tree_bytes(tmp_path / "one")
    two = _tree_bytes(tmp_path / "two")
    assert sorted(one) == sorted(two)
    for name in one:
        assert one[name] == two[name], name
    assert gradcheck_outputs[0] == gradcheck_outputs[1]
    assert "PASS" in gradcheck_outputs[0]
