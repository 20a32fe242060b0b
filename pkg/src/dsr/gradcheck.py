"""Central-difference verification of every analytic gradient path.

Each named group perturbs one parameter family and compares the autograd
directional derivative against a central finite difference. Scenes are tiny
(<= 16x16 images, <= 300 vertices) so the whole suite runs in seconds on one
core. Coverage bandwidth is widened (sigma = 1e-2) so boundary gradients are
active rather than saturated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from dsr.body import (
    DTYPE,
    NUM_POSE,
    NUM_SHAPE,
    BodyParams,
    forward,
    project,
    project_normalized,
    regress_joints,
)
from dsr.fixtures import one_hot_prior, vertex_fine_labels
from dsr.humanoid import build_humanoid
from dsr.losses import (
    distance_transform,
    keypoint_loss_2d,
    keypoint_loss_3d,
    label_nll_loss,
    mask_distance_loss,
    pose_shape_loss,
    soft_iou_loss,
)
from dsr.prior import coarse_vertex_probability, mc_vertex_probability
from dsr.raster import RasterConfig, mesh_to_screen, rasterize_soft

_DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    groups: dict[str, float]    # group name -> max relative error
    tolerance: float
    single: bool

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.groups.values())

    def lines(self) -> list[str]:
        mode = "single-precision data, tolerance 1e-2" if self.single \
            else "double precision, tolerance 1e-4"
        out = [f"gradient check ({mode})"]
        for name, err in self.groups.items():
            mark = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"  {name:<16s} max rel err {err:12.5e}  {mark}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def _quantize(x: Tensor, single: bool) -> Tensor:
    return x.float().double() if single else x


def _directional_error(f, leaves: list[Tensor], eps: float,
                       rng: np.random.Generator, directions: int = 4) -> float:
    """Max relative error between <grad f, u> and central differences along u."""
    value = f()
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    originals = [leaf.detach().clone() for leaf in leaves]
    worst = 0.0
    for _ in range(directions):
        us = [torch.tensor(rng.standard_normal(tuple(leaf.shape)), dtype=DTYPE)
              for leaf in leaves]
        norm = torch.sqrt(sum((u * u).sum() for u in us))
        us = [u / norm for u in us]
        analytic = sum(float((g * u).sum()) for g, u in zip(grads, us)
                       if g is not None)
        samples = []
        for sign in (1.0, -1.0):
            with torch.no_grad():
                for leaf, orig, u in zip(leaves, originals, us):
                    leaf.copy_(orig + sign * eps * u)
                samples.append(float(f()))
        with torch.no_grad():
            for leaf, orig in zip(leaves, originals):
                leaf.copy_(orig)
        fd = (samples[0] - samples[1]) / (2.0 * eps)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), _DENOM_FLOOR)
        worst = max(worst, err)
    return worst


def _random_scene(rng: np.random.Generator, num_faces: int, single: bool
                  ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Well-separated front-facing triangles in normalized coordinates."""
    tris = []
    while len(tris) < num_faces:
        t = rng.uniform(-0.85, 0.85, (3, 2))
        area = 0.5 * ((t[1, 0] - t[0, 0]) * (t[2, 1] - t[0, 1])
                      - (t[2, 0] - t[0, 0]) * (t[1, 1] - t[0, 1]))
        if abs(area) < 0.05:
            continue
        if area > 0:        # flip winding so the face renders front side out
            t = t[[0, 2, 1]]
        tris.append(t)
    verts2d = torch.tensor(np.concatenate(tris, axis=0), dtype=DTYPE)
    z = torch.tensor(rng.uniform(-0.5, 0.5, 3 * num_faces), dtype=DTYPE)
    faces = torch.arange(3 * num_faces, dtype=torch.int64).reshape(num_faces, 3)
    attrs = torch.tensor(rng.uniform(0.1, 1.0, (3 * num_faces, 2)), dtype=DTYPE)
    return (_quantize(verts2d, single), _quantize(z, single), faces,
            _quantize(attrs, single))


def run_gradcheck(seed: int = 0, single: bool = False, scale: int = 12) -> GradCheckReport:
    if scale < 4:
        raise ValueError("scale must be at least 4 pixels")
    rng = np.random.default_rng(seed)
    eps = 1e-3 if single else 1e-5
    tolerance = 1e-2 if single else 1e-4
    cfg = RasterConfig(sigma=1e-2, gamma=0.1)
    size = scale
    groups: dict[str, float] = {}

    verts2d, z, faces, attrs = _random_scene(rng, 6, single)
    cot = torch.tensor(rng.standard_normal((size, size, attrs.shape[1] + 1)),
                       dtype=DTYPE)

    def render_with(v2, zz, at):
        out = rasterize_soft(v2, zz, faces, at, size, size, cfg)
        full = torch.cat([out.image, out.silhouette[..., None]], dim=2)
        return (cot * full).sum()

    leaf = verts2d.clone().requires_grad_(True)
    groups["raster-verts"] = _directional_error(
        lambda: render_with(leaf, z, attrs), [leaf], eps, rng)
    leaf = z.clone().requires_grad_(True)
    groups["raster-depth"] = _directional_error(
        lambda: render_with(verts2d, leaf, attrs), [leaf], eps, rng)
    leaf = attrs.clone().requires_grad_(True)
    groups["raster-attrs"] = _directional_error(
        lambda: render_with(verts2d, z, leaf), [leaf], eps, rng)

    points3d = torch.cat([verts2d, z[:, None]], dim=1)
    camera = _quantize(torch.tensor([0.9, 0.03, -0.02], dtype=DTYPE),
                       single).requires_grad_(True)

    def render_camera():
        v2 = project_normalized(points3d, camera)
        return render_with(v2, z, attrs)

    groups["camera"] = _directional_error(render_camera, [camera], eps, rng)

    mask = rng.integers(0, 2, (size, size))
    field = distance_transform(mask)
    coverage = _quantize(torch.tensor(rng.uniform(0.0, 1.0, (size, size)),
                                      dtype=DTYPE), single).requires_grad_(True)
    groups["loss-distm"] = _directional_error(
        lambda: mask_distance_loss(coverage, field)[0], [coverage], eps, rng)

    pred = _quantize(torch.tensor(rng.uniform(0.05, 0.95, (size, size)),
                                  dtype=DTYPE), single).requires_grad_(True)
    groups["loss-siou"] = _directional_error(
        lambda: soft_iou_loss(pred, mask)[0], [pred], eps, rng)

    chans = _quantize(torch.tensor(rng.standard_normal((size, size, 4)),
                                   dtype=DTYPE), single).requires_grad_(True)
    labels = rng.integers(0, 4, (size, size))
    domain = rng.integers(0, 2, (size, size)).astype(bool)
    domain[0, 0] = True
    groups["loss-nll"] = _directional_error(
        lambda: label_nll_loss(chans, labels, domain=domain)[0], [chans], eps, rng)

    j = 24
    target2d = rng.uniform(0.0, size, (j, 3))
    target2d[:, 2] = rng.uniform(0.1, 1.0, j)
    target3d = rng.standard_normal((j, 3))
    p2 = _quantize(torch.tensor(rng.uniform(0.0, size, (j, 2)), dtype=DTYPE),
                   single).requires_grad_(True)
    p3 = _quantize(torch.tensor(rng.standard_normal((j, 3)), dtype=DTYPE),
                   single).requires_grad_(True)
    th = _quantize(torch.tensor(rng.normal(0.0, 0.2, NUM_POSE), dtype=DTYPE),
                   single).requires_grad_(True)
    be = _quantize(torch.tensor(rng.normal(0.0, 0.3, NUM_SHAPE), dtype=DTYPE),
                   single).requires_grad_(True)
    th_ref = rng.normal(0.0, 0.2, NUM_POSE)
    be_ref = rng.normal(0.0, 0.3, NUM_SHAPE)
    groups["supervision"] = _directional_error(
        lambda: keypoint_loss_2d(p2, target2d) + keypoint_loss_3d(p3, target3d)
        + pose_shape_loss(th, th_ref, be, be_ref),
        [p2, p3, th, be], eps, rng)

    groups["chain"] = _chain_error(rng, eps, single)
    return GradCheckReport(groups=groups, tolerance=tolerance, single=single)


def _chain_error(rng: np.random.Generator, eps: float, single: bool) -> float:
    """Parameters -> skinned body -> projection -> render -> combined loss."""
    template = build_humanoid(ring_size=3)
    vlabels = vertex_fine_labels(template)
    prior = one_hot_prior(vlabels)
    rows = np.concatenate([mc_vertex_probability(prior)[:, None],
                           coarse_vertex_probability(prior)], axis=1)
    attrs = torch.tensor(rows, dtype=DTYPE)
    background = torch.tensor([0.0, 1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    size = 16
    cfg = RasterConfig(sigma=1e-2, gamma=0.1)
    j = template.joint_regressor.shape[0]
    t2d = rng.uniform(2.0, size - 2.0, (j, 3))
    t2d[:, 2] = 1.0
    t3d = rng.normal(0.0, 0.3, (j, 3))
    labels = rng.integers(0, 4, (size, size))
    mask = rng.integers(0, 2, (size, size))
    field = distance_transform(mask)
    th_ref = rng.normal(0.0, 0.1, NUM_POSE)
    be_ref = rng.normal(0.0, 0.3, NUM_SHAPE)

    theta = _quantize(torch.tensor(rng.normal(0.0, 0.1, NUM_POSE), dtype=DTYPE),
                      single).requires_grad_(True)
    beta = _quantize(torch.tensor(rng.normal(0.0, 0.3, NUM_SHAPE), dtype=DTYPE),
                     single).requires_grad_(True)
    camera = _quantize(torch.tensor([1.0, 0.01, -0.07], dtype=DTYPE),
                       single).requires_grad_(True)

    def chain():
        mesh = forward(template, BodyParams(theta, beta, camera))
        joints = regress_joints(mesh, template)
        j2 = project(joints, camera, size, size)
        v2, vz = mesh_to_screen(mesh.vertices, camera)
        soft = rasterize_soft(v2, vz, template.faces, attrs, size, size, cfg,
                              background=background)
        loss = (keypoint_loss_2d(j2, t2d) + keypoint_loss_3d(joints, t3d)
                + pose_shape_loss(theta, th_ref, beta, be_ref))
        loss = loss + soft_iou_loss(soft.silhouette, mask)[0]
        loss = loss + label_nll_loss(soft.image[..., 1:5], labels)[0]
        loss = loss + mask_distance_loss(soft.image[..., 0], field)[0]
        return loss

    return _directional_error(chain, [theta, beta, camera],
                              1e-6 if not single else eps, rng)
