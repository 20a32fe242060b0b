"""Synthetic data generation: painted label images, scan sets, fit samples.

Everything here is deterministic given a seed, so fixture files are
byte-identical across runs. Clothing labels are painted per vertex from the
dominant skinning joint, which gives clean garment regions that survive the
mask pipeline at small image sizes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

import dsr.io as dsr_io
from dsr.body import NUM_POSE, NUM_SHAPE, BodyParams, forward, project, regress_joints
from dsr.fitting import FitSchedule, FitTargets, evaluate, fit
from dsr.humanoid import build_humanoid
from dsr.losses import LossWeights
from dsr.masks import process_sample
from dsr.prior import LABEL_NAMES, VertexLabelPrior, label_index, normalize_counts
from dsr.raster import SENTINEL_NONE, HardRender, RasterConfig, mesh_to_screen, rasterize_hard

_LEFT_ARM = (16, 18, 20, 22)
_RIGHT_ARM = (17, 19, 21, 23)
_LEFT_FOOT = (7, 10)
_RIGHT_FOOT = (8, 11)
_HEAD = (15,)
_LEGS = (1, 2, 4, 5)


def vertex_fine_labels(template, outfit: str = "pants") -> np.ndarray:
    """Per-vertex 20-class clothing label, chosen by dominant skinning joint.

    The skull is split front/back: only the camera-facing half is Face, the
    back half is a hood (UpperClothes). Head rotations therefore move the
    Face region across an otherwise round skull.
    """
    if outfit not in ("pants", "skirt"):
        raise ValueError("outfit must be 'pants' or 'skirt'")
    dominant = template.skin_weights.argmax(dim=1).numpy()
    labels = np.full(dominant.shape, label_index("UpperClothes"), dtype=np.uint8)
    legs_label = label_index("Pants" if outfit == "pants" else "Skirt")
    for joints, name in ((_LEFT_ARM, "LeftArm"), (_RIGHT_ARM, "RightArm"),
                         (_LEFT_FOOT, "LeftShoe"), (_RIGHT_FOOT, "RightShoe"),
                         (_HEAD, "Face")):
        labels[np.isin(dominant, joints)] = label_index(name)
    labels[np.isin(dominant, _LEGS)] = legs_label
    hooded = np.isin(dominant, _HEAD) & (template.vertices.numpy()[:, 2] > 0.005)
    labels[hooded] = label_index("UpperClothes")
    return labels


def pixel_labels_from_hard(hard: HardRender, faces, vertex_labels) -> np.ndarray:
    """Label image: each covered pixel takes the label of its closest corner."""
    face = hard.face_index.numpy()
    corner = hard.bary.numpy().argmax(axis=2)
    covered = face != SENTINEL_NONE
    out = np.zeros(face.shape, dtype=np.uint8)
    fv = np.asarray(faces)[face[covered], corner[covered]]
    out[covered] = np.asarray(vertex_labels)[fv]
    return out


def render_label_image(template, params: BodyParams, vertex_labels,
                       width: int, height: int,
                       config: RasterConfig | None = None) -> np.ndarray:
    config = config or RasterConfig()
    mesh = forward(template, params)
    verts2d, z = mesh_to_screen(mesh.vertices, params.camera)
    hard = rasterize_hard(verts2d, z, template.faces, width, height, config)
    return pixel_labels_from_hard(hard, template.faces.numpy(), vertex_labels)


def one_hot_prior(vertex_labels, eps_bg: float = 0.05) -> VertexLabelPrior:
    """Prior that concentrates each vertex on its painted label."""
    labels = np.asarray(vertex_labels)
    counts = np.zeros((labels.shape[0], len(LABEL_NAMES)), dtype=np.int64)
    counts[np.arange(labels.shape[0]), labels] = 1
    return normalize_counts(counts, eps_bg)


def random_params(rng: np.random.Generator, pose_sigma: float = 0.12,
                  shape_sigma: float = 0.5) -> BodyParams:
    theta = np.clip(rng.normal(0.0, pose_sigma, NUM_POSE), -0.3, 0.3)
    beta = np.clip(rng.normal(0.0, shape_sigma, NUM_SHAPE), -1.0, 1.0)
    camera = np.array([1.0 + rng.uniform(-0.05, 0.05),
                       rng.uniform(-0.03, 0.03),
                       -0.08 + rng.uniform(-0.03, 0.03)])
    return BodyParams(theta, beta, camera)


def make_fixture_set(out_dir, num_scans: int = 3, seed: int = 0,
                     width: int = 96, height: int = 96,
                     ring_size: int = 8) -> dict[str, Path]:
    """Write a self-contained data set: template, scan triples, one fit sample.

    Layout: template.dsrt, scans/scan_###.{obj,camera.json,labels.png},
    sample/{init.json,gt.json,keypoints.json,labels.png}.
    """
    out = Path(out_dir)
    scans_dir = out / "scans"
    sample_dir = out / "sample"
    scans_dir.mkdir(parents=True, exist_ok=True)
    sample_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    template = build_humanoid(ring_size=ring_size)
    dsr_io.save_template(out / "template.dsrt", template)

    for k in range(num_scans):
        params = random_params(rng)
        outfit = "pants" if k % 2 == 0 else "skirt"
        vlabels = vertex_fine_labels(template, outfit)
        mesh = forward(template, params)
        stem = scans_dir / f"scan_{k:03d}"
        dsr_io.write_obj(stem.with_suffix(".obj"), mesh.vertices.numpy(),
                         template.faces.numpy())
        dsr_io.save_camera(Path(f"{stem}.camera.json"), params.camera.numpy())
        labels = render_label_image(template, params, vlabels, width, height)
        dsr_io.write_label_png(Path(f"{stem}.labels.png"), labels)

    gt = random_params(rng)
    theta0 = gt.theta.numpy() + rng.normal(0.0, 0.1, NUM_POSE)
    init = BodyParams(theta0, gt.beta, gt.camera)
    vlabels = vertex_fine_labels(template, "pants")
    mesh = forward(template, gt)
    joints3d = regress_joints(mesh, template)
    joints2d = project(joints3d, gt.camera, width, height)
    kp = np.concatenate([joints2d.numpy(),
                         np.ones((joints2d.shape[0], 1))], axis=1)
    dsr_io.save_params(sample_dir / "gt.json", gt)
    dsr_io.save_params(sample_dir / "init.json", init)
    dsr_io.save_keypoints(sample_dir / "keypoints.json", joints2d=kp,
                          joints3d=joints3d.numpy())
    labels = render_label_image(template, gt, vlabels, width, height)
    dsr_io.write_label_png(sample_dir / "labels.png", labels)
    return {"template": out / "template.dsrt", "scans": scans_dir,
            "sample": sample_dir}


# 2D keypoints a detector would report: pelvis, hips, knees, ankles, neck,
# head, shoulders, elbows, wrists. Spine internals, collars, hand tips, and
# toes carry confidence zero.
DETECTABLE_JOINTS = (0, 1, 2, 4, 5, 7, 8, 12, 15, 16, 17, 18, 19, 20, 21)


def pose_noise_experiment(instances: int = 20, iterations: int = 100,
                          noise_sigma: float = 0.1, seed: int = 7,
                          width: int = 160, height: int = 160,
                          min_pixels: int = 30, ring_size: int = 8,
                          step_size: float = 1e-2) -> dict:
    """Compare keypoint-only fits against keypoint + render-based fits.

    Each instance: a posed ground-truth body, detector-style 2D keypoint
    targets plus painted mask targets rendered from it, and an initialization
    with Gaussian pose noise. Both fits optimize pose only, from the same
    start, with the same optimizer settings. Returns per-instance vertex
    errors and the aggregate comparison.

    Keypoints leave two holes that the render terms fill. Joints absent from
    the detector set (hands, toes, spine) keep their initialization noise,
    and rotations that leave ring centroids fixed (head yaw, bone twist) are
    invisible to every keypoint. Both show up in the masks: paddle hands,
    flat feet, and the frontal face patch all change the rendered layout.
    The render config is sharper than the package default (thin coverage
    band, hard depth softmax) and the render weights are small so that the
    residual floor of the mask terms does not perturb keypoint-pinned dims.
    """
    template = build_humanoid(ring_size=ring_size)
    vlabels = vertex_fine_labels(template, "pants")
    prior = one_hot_prior(vlabels)
    raster = RasterConfig(sigma=1e-6, gamma=0.01)
    joint_schedule = FitSchedule(
        iterations=iterations, warmup=0, step_size=step_size,
        weights=LossWeights(w_mc=0.0, w_c=0.0),
        optimize_beta=False, optimize_camera=False)
    dsr_schedule = FitSchedule(
        iterations=iterations, warmup=0, step_size=step_size,
        weights=LossWeights(w_mc=0.003, w_c=0.003),
        optimize_beta=False, optimize_camera=False, raster=raster)

    rows = []
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        gt = random_params(rng)
        mesh_gt = forward(template, gt)
        joints3d = regress_joints(mesh_gt, template)
        joints2d = project(joints3d, gt.camera, width, height)
        conf = np.zeros((joints2d.shape[0], 1))
        conf[list(DETECTABLE_JOINTS)] = 1.0
        kp = np.concatenate([joints2d.numpy(), conf], axis=1)
        kp_full = np.concatenate([joints2d.numpy(),
                                  np.ones((joints2d.shape[0], 1))], axis=1)
        labels = render_label_image(template, gt, vlabels, width, height)
        sample = process_sample(labels, kp_full, min_pixels=min_pixels)
        theta0 = gt.theta.numpy() + rng.normal(0.0, noise_sigma, NUM_POSE)
        init = BodyParams(theta0, gt.beta, gt.camera)

        base = FitTargets(width, height, joints2d=kp)
        full = FitTargets(width, height, joints2d=kp,
                          mc_mask=sample.mc_mask, c_mask=sample.c_mask)
        res_j = fit(template, init, base, prior=None, schedule=joint_schedule,
                    gt_vertices=mesh_gt.vertices)
        res_d = fit(template, init, full, prior=prior, schedule=dsr_schedule,
                    gt_vertices=mesh_gt.vertices)
        if res_j.diverged or res_d.diverged:
            raise RuntimeError(f"instance {i} diverged: "
                               f"{res_j.message or res_d.message}")
        rows.append({"instance": i,
                     "pve_joints": res_j.metrics["pve"],
                     "pve_dsr": res_d.metrics["pve"],
                     "mc_classes": list(sample.valid_mc_labels)})

    pj = np.array([r["pve_joints"] for r in rows])
    pd = np.array([r["pve_dsr"] for r in rows])
    return {"instances": rows,
            "median_pve_joints": float(np.median(pj)),
            "median_pve_dsr": float(np.median(pd)),
            "wins": int((pd < pj).sum()),
            "count": len(rows)}
