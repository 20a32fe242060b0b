"""Gradient-based per-instance fitting and its evaluation metrics.

The fitter optimizes pose/shape/camera parameters against any subset of:
2-D keypoints, 3-D joints, reference parameters, a binary body-region mask,
and a 4-class clothing mask. Render-based terms are gated by a warmup and by
per-sample validity; a gated term is never computed, so a run with those
terms disabled is bit-identical to a run that never had them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

import dsr.io as dsr_io
from dsr.body import (
    DTYPE,
    BodyParams,
    BodyTemplate,
    TriangleMesh,
    forward,
    project,
    regress_joints,
)
from dsr.losses import (
    DistanceField,
    LossWeights,
    distance_transform,
    label_nll_loss,
    mask_distance_loss,
    soft_iou_loss,
    supervision_losses,
    total_loss,
)
from dsr.prior import VertexLabelPrior, coarse_vertex_probability, mc_vertex_probability
from dsr.raster import (
    SENTINEL_NONE,
    RasterConfig,
    mesh_to_screen,
    rasterize_hard,
    render_semantic_channels,
    visible_vertices,
)

OPTIMIZERS = ("adaptive-moments", "gradient-descent")
MC_METRICS = ("siou", "distm")
_MIN_CAMERA_SCALE = 1e-3


@dataclass
class FitTargets:
    """Ground truth available for one sample; any subset may be present."""

    width: int
    height: int
    joints2d: np.ndarray | None = None      # (J, 3) pixel x, y, confidence
    joints3d: np.ndarray | None = None      # (J, 3) meters
    theta_ref: np.ndarray | None = None     # (72,)
    beta_ref: np.ndarray | None = None      # (10,)
    mc_mask: np.ndarray | None = None       # (H, W) binary
    c_mask: np.ndarray | None = None        # (H, W) ids in {0..3}

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("target image size must be positive")
        for name in ("mc_mask", "c_mask"):
            m = getattr(self, name)
            if m is not None and np.asarray(m).shape != (self.height, self.width):
                raise ValueError(f"{name} must be ({self.height}, {self.width})")
        if not any(x is not None for x in (self.joints2d, self.joints3d,
                                           self.theta_ref, self.mc_mask, self.c_mask)):
            raise ValueError("targets contain no active term")


@dataclass
class FitSchedule:
    """Optimization hyperparameters. warmup=None means 10% of iterations."""

    iterations: int = 100
    warmup: int | None = None
    step_size: float = 1e-2
    optimizer: str = "adaptive-moments"
    weights: LossWeights = field(default_factory=LossWeights)
    mc_metric: str = "siou"
    nll_reduction: str = "mean"
    optimize_theta: bool = True
    optimize_beta: bool = True
    optimize_camera: bool = True
    raster: RasterConfig = field(default_factory=RasterConfig)

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mc_metric not in MC_METRICS:
            raise ValueError(f"mc_metric must be one of {MC_METRICS}")
        if self.warmup is not None and not 0 <= self.warmup <= self.iterations:
            raise ValueError("warmup must lie in [0, iterations]")

    @property
    def resolved_warmup(self) -> int:
        return self.iterations // 10 if self.warmup is None else self.warmup


@dataclass
class FitResult:
    params: BodyParams
    trace: list[dict]
    metrics: dict[str, float] | None = None
    diverged: bool = False
    message: str | None = None

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.trace)


def _make_optimizer(name: str, leaves: list[Tensor], lr: float) -> torch.optim.Optimizer:
    if name == "adaptive-moments":
        return torch.optim.Adam(leaves, lr=lr)
    return torch.optim.SGD(leaves, lr=lr)


def fit(template: BodyTemplate, params0: BodyParams, targets: FitTargets,
        prior: VertexLabelPrior | None = None,
        schedule: FitSchedule | None = None,
        gt_vertices: Tensor | None = None,
        render_every: int | None = None,
        render_dir=None) -> FitResult:
    """First-order fit of BodyParams to the targets.

    Deterministic: no RNG is consumed. On a non-finite loss or invalid
    parameter state the fit aborts, returning the last finite parameters,
    the trace up to that point, and a diagnostic message.
    """
    if schedule is None:
        schedule = FitSchedule()
    theta = params0.theta.detach().clone().requires_grad_(schedule.optimize_theta)
    beta = params0.beta.detach().clone().requires_grad_(schedule.optimize_beta)
    camera = params0.camera.detach().clone().requires_grad_(schedule.optimize_camera)
    leaves = [t for t in (theta, beta, camera) if t.requires_grad]
    if not leaves:
        raise ValueError("no parameter group selected for optimization")
    opt = _make_optimizer(schedule.optimizer, leaves, schedule.step_size)

    weights = schedule.weights
    warmup = schedule.resolved_warmup
    want_mc = weights.w_mc > 0 and targets.mc_mask is not None and prior is not None
    want_c = weights.w_c > 0 and targets.c_mask is not None and prior is not None

    mc_rows = c_rows = None
    mc_dist: DistanceField | None = None
    if want_mc:
        mc_rows = torch.from_numpy(mc_vertex_probability(prior))[:, None]
        if schedule.mc_metric == "distm":
            mc_dist = distance_transform(targets.mc_mask)
    if want_c:
        c_rows = torch.from_numpy(coarse_vertex_probability(prior))

    width, height = targets.width, targets.height
    faces = template.faces
    trace: list[dict] = []
    diverged = False
    message = None
    good = (params0.theta.detach().clone(), params0.beta.detach().clone(),
            params0.camera.detach().clone())

    for it in range(schedule.iterations):
        record: dict = {"iter": it}
        try:
            params = BodyParams(theta, beta, camera)
            good = (theta.detach().clone(), beta.detach().clone(),
                    camera.detach().clone())
            mesh = forward(template, params)
            joints = regress_joints(mesh, template)
            pred2d = (project(joints, camera, width, height)
                      if targets.joints2d is not None else None)
            sup = supervision_losses(
                pred_joints2d=pred2d, gt_joints2d=targets.joints2d,
                pred_joints3d=joints, gt_joints3d=targets.joints3d,
                theta=theta, theta_ref=targets.theta_ref,
                beta=beta, beta_ref=targets.beta_ref, weights=weights)
            for key in ("l2d", "l3d", "ltheta"):
                if key in sup:
                    record[key] = float(sup[key].detach())

            mc_term = c_term = None
            soft = sil = None
            if (want_mc or want_c) and it >= warmup:
                verts2d, vz = mesh_to_screen(mesh.vertices, camera)
                hard = rasterize_hard(verts2d, vz, faces, width, height, schedule.raster)
                vis = visible_vertices(hard, faces, mesh.num_vertices)
                sil = hard.face_index != SENTINEL_NONE
                cols, bg = [], []
                if want_mc:
                    cols.append(mc_rows)
                    bg.append(0.0)
                if want_c:
                    cols.append(c_rows)
                    bg.extend([1.0, 0.0, 0.0, 0.0])   # empty pixels read as Background
                attrs = torch.cat(cols, dim=1)
                soft = render_semantic_channels(
                    verts2d, vz, faces, attrs, vis, width, height, schedule.raster,
                    background=torch.tensor(bg, dtype=DTYPE))
                col = 0
                if want_mc:
                    chan = soft.image[..., col]
                    col += 1
                    if schedule.mc_metric == "siou":
                        mc_term = soft_iou_loss(chan, targets.mc_mask)
                    else:
                        mc_term = mask_distance_loss(chan, mc_dist)
                    if mc_term[1]:
                        record["lmc"] = float(mc_term[0].detach())
                if want_c:
                    chans = soft.image[..., col:col + 4]
                    c_term = label_nll_loss(chans, targets.c_mask, domain=sil,
                                            reduction=schedule.nll_reduction)
                    if c_term[1]:
                        record["lc"] = float(c_term[0].detach())

            total = total_loss(sup["total"], mc_term, c_term, weights, it, warmup)
            record["total"] = float(total.detach())
            if not np.isfinite(record["total"]):
                raise ValueError(f"non-finite total loss at iteration {it}")
        except ValueError as exc:
            diverged = True
            message = str(exc)
            break

        if render_dir is not None and render_every and it % render_every == 0:
            _dump_renders(render_dir, it, template, theta, beta, camera,
                          width, height, schedule.raster, soft)

        opt.zero_grad()
        total.backward()
        opt.step()
        if schedule.optimize_camera:
            with torch.no_grad():
                camera.clamp_(min=torch.tensor([_MIN_CAMERA_SCALE, -torch.inf, -torch.inf]))
        trace.append(record)

    try:
        final = BodyParams(theta.detach().clone(), beta.detach().clone(),
                           camera.detach().clone())
    except ValueError as exc:
        # the last step itself blew up; fall back to the newest valid state
        diverged = True
        if message is None:
            message = str(exc)
        final = BodyParams(*good)
    metrics = None
    if gt_vertices is not None:
        mesh = forward(template, final)
        metrics = evaluate(mesh, TriangleMesh(gt_vertices, template.faces),
                           template.joint_regressor)
    return FitResult(params=final, trace=trace, metrics=metrics,
                     diverged=diverged, message=message)


def _dump_renders(render_dir, it, template, theta, beta, camera, width, height,
                  config, soft) -> None:
    out = Path(render_dir)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        params = BodyParams(theta, beta, camera)
        mesh = forward(template, params)
        verts2d, vz = mesh_to_screen(mesh.vertices, camera)
        hard = rasterize_hard(verts2d, vz, template.faces, width, height, config)
        covered = (hard.face_index.numpy() != SENTINEL_NONE).astype(np.uint8)
        dsr_io.write_label_png(out / f"iter_{it:06d}.sil.png", covered)
        if soft is not None:
            img = soft.image.detach().numpy()
            for c in range(img.shape[2]):
                dsr_io.write_pfm(out / f"iter_{it:06d}.c{c}.pfm", img[:, :, c])


def umeyama_alignment(source: np.ndarray, target: np.ndarray
                      ) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity transform (s, R, t) minimizing ||s R x + t - y||^2."""
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("point sets must share shape (N, D)")
    mu_x = x.mean(0)
    mu_y = y.mean(0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / len(x)
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(x.shape[1])
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[-1, -1] = -1.0
    rot = u @ s_fix @ vt
    var_x = (xc * xc).sum() / len(x)
    scale = float(np.trace(np.diag(d) @ s_fix) / var_x)
    trans = mu_y - scale * rot @ mu_x
    return scale, rot, trans


def evaluate(pred_mesh: TriangleMesh, gt_mesh: TriangleMesh,
             joint_regressor: Tensor) -> dict[str, float]:
    """MPJPE (root-aligned), PA-MPJPE (similarity-aligned), PVE, in millimeters."""
    if pred_mesh.num_vertices != gt_mesh.num_vertices:
        raise ValueError("meshes differ in vertex count")
    if pred_mesh.faces.shape != gt_mesh.faces.shape or \
            bool((pred_mesh.faces != gt_mesh.faces).any()):
        raise ValueError("meshes differ in face topology")
    reg = torch.as_tensor(joint_regressor, dtype=DTYPE).numpy()
    vp = pred_mesh.vertices.detach().numpy()
    vg = gt_mesh.vertices.detach().numpy()
    jp = reg @ vp
    jg = reg @ vg

    root_aligned = (jp - jp[0]) - (jg - jg[0])
    mpjpe = float(np.linalg.norm(root_aligned, axis=1).mean())
    scale, rot, trans = umeyama_alignment(jp, jg)
    pa = scale * jp @ rot.T + trans
    pa_mpjpe = float(np.linalg.norm(pa - jg, axis=1).mean())
    pve = float(np.linalg.norm(vp - vg, axis=1).mean())
    out = {"mpjpe": mpjpe * 1000.0, "pa_mpjpe": pa_mpjpe * 1000.0, "pve": pve * 1000.0}
    if not all(np.isfinite(v) for v in out.values()):
        raise ValueError("non-finite evaluation metrics")
    return out
