"""Differentiable soft rasterizer and exact hard rasterizer.

Soft coverage per face and pixel is sigmoid(delta * d^2 / sigma) where d is
the distance (normalized coordinates) from the pixel center to the nearest
point on the triangle boundary and delta is +1 inside, -1 outside. Faces are
blended by a depth softmax: weight_f = coverage_f * exp(zn_f / gamma) with
zn = (far - zbar) / (far - near), plus a background term with zn = 0; the
per-pixel weights (faces + background) sum to 1.

Attributes live on vertices and are interpolated with barycentric
coordinates clamped to [0, 1] and renormalized, so pixels outside a face
read a boundary value instead of an extrapolated one.

Two execution paths compute the same formulas: a dense all-pairs path (used
for small images; exact reference) and a sparse path that visits only pixels
within a coverage margin of each face's bounding box, truncating
contributions below config.tail_eps (used for fitting-scale renders).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from dsr.body import DTYPE, pixel_centers_normalized, project_normalized

SENTINEL_NONE = -1
_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class RasterConfig:
    """Rasterizer knobs. Defaults give sharp, nearly-hard soft renders."""

    sigma: float = 1e-5
    gamma: float = 0.1
    near: float = -1.0
    far: float = 1.0
    background_value: float = 0.0
    tail_eps: float = 1e-12     # sparse path: drop coverage below this
    dense_budget: int = 2_000_000   # auto path: max face*pixel pairs for dense

    def __post_init__(self) -> None:
        if self.sigma <= 0 or self.gamma <= 0:
            raise ValueError("sigma and gamma must be positive")
        if not self.far > self.near:
            raise ValueError("far must exceed near")


@dataclass
class SoftRender:
    image: Tensor        # (H, W, C) aggregated attributes
    silhouette: Tensor   # (H, W) total foreground weight, 1 - w_background


@dataclass
class HardRender:
    face_index: Tensor   # (H, W) int64, SENTINEL_NONE where empty
    depth: Tensor        # (H, W) interpolated z, config.far where empty
    bary: Tensor         # (H, W, 3) barycentric coords of the winner, else 0


def mesh_to_screen(vertices: Tensor, camera: Tensor) -> tuple[Tensor, Tensor]:
    """Split posed vertices into projected 2-D (normalized) and view z."""
    return project_normalized(vertices, camera), vertices[..., 2]


def _face_pixel_terms(tri: Tensor, triz: Tensor, px: Tensor, py: Tensor,
                      cfg: RasterConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Coverage, clamped interpolated depth, and clipped barycentrics.

    tri (..., 3, 2) and triz (..., 3) broadcast against pixel centers px/py
    (...,). Returns (coverage, zbar, lam) with lam (..., 3).
    """
    ax, ay = tri[..., 0, 0], tri[..., 0, 1]
    bx, by = tri[..., 1, 0], tri[..., 1, 1]
    cx, cy = tri[..., 2, 0], tri[..., 2, 1]

    # edge functions; each is the cross product opposite one vertex
    ea = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    eb = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    ec = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    degenerate = area.abs() < _DEGENERATE_AREA
    inside = torch.where(area > 0, (ea >= 0) & (eb >= 0) & (ec >= 0),
                         (ea <= 0) & (eb <= 0) & (ec <= 0)) & ~degenerate

    d2 = torch.minimum(
        torch.minimum(_segment_dist2(px, py, ax, ay, bx, by),
                      _segment_dist2(px, py, bx, by, cx, cy)),
        _segment_dist2(px, py, cx, cy, ax, ay))
    delta = torch.where(inside, 1.0, -1.0)
    coverage = torch.sigmoid(delta * d2 / cfg.sigma)

    area_safe = torch.where(degenerate, torch.ones_like(area), area)
    lam = torch.stack([ea, eb, ec], dim=-1) / area_safe[..., None]
    lam = lam.clamp(0.0, 1.0)
    lam = lam / lam.sum(-1, keepdim=True).clamp(min=1e-12)
    lam = torch.where(degenerate[..., None], torch.full_like(lam, 1.0 / 3.0), lam)
    zbar = (lam * triz).sum(-1).clamp(cfg.near, cfg.far)
    return coverage, zbar, lam


def _segment_dist2(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    wx, wy = px - x0, py - y0
    dd = (dx * dx + dy * dy).clamp(min=1e-300)
    t = ((wx * dx + wy * dy) / dd).clamp(0.0, 1.0)
    rx, ry = wx - t * dx, wy - t * dy
    return rx * rx + ry * ry


def _front_faces(verts2d: Tensor, faces: Tensor) -> Tensor:
    tri = verts2d[faces]
    area = ((tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
            - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0]))
    # y points down, so screen counter-clockwise means negative signed area
    return area < 0


def _check_screen_inputs(verts2d: Tensor, z: Tensor, faces: Tensor) -> None:
    if verts2d.ndim != 2 or verts2d.shape[1] != 2:
        raise ValueError(f"verts2d must be (V, 2), got {tuple(verts2d.shape)}")
    if z.shape != verts2d.shape[:1]:
        raise ValueError("z must be (V,) matching verts2d")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError(f"faces must be (F, 3), got {tuple(faces.shape)}")
    if faces.numel() and (faces.min() < 0 or faces.max() >= verts2d.shape[0]):
        raise ValueError("face index out of range")


def _candidate_pairs(verts2d: np.ndarray, faces: np.ndarray, width: int, height: int,
                     margin_norm: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-face pixel candidates: (face_id, pixel_id) arrays, deterministic order."""
    tri = verts2d[faces]  # (F, 3, 2)
    # normalized -> pixel-center coordinates (integer coords are centers)
    pxs = (tri[:, :, 0] + 1.0) * (width / 2.0) - 0.5
    pys = (tri[:, :, 1] + 1.0) * (height / 2.0) - 0.5
    mx = margin_norm * (width / 2.0) + 1.0
    my = margin_norm * (height / 2.0) + 1.0
    x0 = np.maximum(np.ceil(pxs.min(1) - mx), 0).astype(np.int64)
    x1 = np.minimum(np.floor(pxs.max(1) + mx), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(pys.min(1) - my), 0).astype(np.int64)
    y1 = np.minimum(np.floor(pys.max(1) + my), height - 1).astype(np.int64)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    n = w * h
    total = int(n.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    f_idx = np.repeat(np.arange(len(faces), dtype=np.int64), n)
    offsets = np.concatenate([[0], np.cumsum(n)[:-1]])
    local = np.arange(total, dtype=np.int64) - offsets[f_idx]
    wj = w[f_idx]
    dj = local % wj
    di = local // wj
    p_idx = (y0[f_idx] + di) * width + (x0[f_idx] + dj)
    return f_idx, p_idx


def _soft_dense(verts2d, z, faces, attrs, background, width, height, cfg):
    gx, gy = pixel_centers_normalized(width, height)
    px, py = gx.reshape(-1), gy.reshape(-1)
    tri = verts2d[faces][:, None]        # (F, 1, 3, 2)
    triz = z[faces][:, None]             # (F, 1, 3)
    cov, zbar, lam = _face_pixel_terms(tri, triz, px[None, :], py[None, :], cfg)
    score = (cfg.far - zbar) / (cfg.far - cfg.near) / cfg.gamma       # (F, P)
    if score.shape[0]:
        m = score.detach().amax(0).clamp(min=0.0)
    else:
        m = torch.zeros_like(px)
    num = cov * torch.exp(score - m[None, :])                          # (F, P)
    bg_w = torch.exp(-m)                                               # (P,)
    denom = num.sum(0) + bg_w
    face_attr = torch.einsum("fpk,fkc->fpc", lam, attrs[faces])        # (F, P, C)
    acc = (num[..., None] * face_attr).sum(0)                          # (P, C)
    img = (acc + bg_w[:, None] * background[None, :]) / denom[:, None]
    return img.reshape(height, width, -1)


def _soft_sparse(verts2d, z, faces, attrs, background, width, height, cfg):
    pixels = width * height
    margin = math.sqrt(cfg.sigma * math.log(1.0 / cfg.tail_eps))
    f_np, p_np = _candidate_pairs(verts2d.detach().numpy(), faces.numpy(),
                                  width, height, margin)
    n_chan = attrs.shape[1]
    gx, gy = pixel_centers_normalized(width, height)
    if len(f_np) == 0:
        img = background.expand(pixels, n_chan).reshape(height, width, n_chan).clone()
        return img
    f_idx = torch.from_numpy(f_np)
    p_idx = torch.from_numpy(p_np)
    tri = verts2d[faces][f_idx]          # (T, 3, 2)
    triz = z[faces][f_idx]               # (T, 3)
    px = gx.reshape(-1)[p_idx]
    py = gy.reshape(-1)[p_idx]
    cov, zbar, lam = _face_pixel_terms(tri, triz, px, py, cfg)
    score = (cfg.far - zbar) / (cfg.far - cfg.near) / cfg.gamma
    m = torch.zeros(pixels, dtype=DTYPE).scatter_reduce(
        0, p_idx, score.detach(), reduce="amax", include_self=True)
    num = cov * torch.exp(score - m[p_idx])
    bg_w = torch.exp(-m)
    denom = torch.zeros(pixels, dtype=DTYPE).index_add(0, p_idx, num) + bg_w
    face_attr = (lam[..., None] * attrs[faces][f_idx]).sum(1)          # (T, C)
    acc = torch.zeros(pixels, n_chan, dtype=DTYPE).index_add(
        0, p_idx, num[:, None] * face_attr)
    img = (acc + bg_w[:, None] * background[None, :]) / denom[:, None]
    return img.reshape(height, width, n_chan)


def rasterize_soft(verts2d: Tensor, z: Tensor, faces: Tensor, attrs: Tensor,
                   width: int, height: int, config: RasterConfig = RasterConfig(),
                   background: Tensor | None = None, method: str = "auto") -> SoftRender:
    """Soft-rasterize per-vertex attributes to an (H, W, C) image.

    A silhouette channel (total foreground weight) is always computed
    alongside the requested channels. `method` is "dense", "sparse", or
    "auto" (dense when faces * pixels fits config.dense_budget).
    """
    verts2d = torch.as_tensor(verts2d, dtype=DTYPE)
    z = torch.as_tensor(z, dtype=DTYPE)
    faces = torch.as_tensor(faces, dtype=torch.int64)
    attrs = torch.as_tensor(attrs, dtype=DTYPE)
    _check_screen_inputs(verts2d, z, faces)
    bad = ~(torch.isfinite(verts2d).all(1) & torch.isfinite(z))
    if bool(bad.any()):
        raise ValueError(f"non-finite projected coordinates at vertex "
                         f"{int(bad.nonzero()[0, 0])}")
    if attrs.ndim != 2 or attrs.shape[0] != verts2d.shape[0]:
        raise ValueError("attrs must be (V, C)")
    n_chan = attrs.shape[1]
    if background is None:
        bg = torch.full((n_chan,), config.background_value, dtype=DTYPE)
    else:
        bg = torch.as_tensor(background, dtype=DTYPE)
        if bg.shape != (n_chan,):
            raise ValueError(f"background must be ({n_chan},)")

    # only screen counter-clockwise faces take part in blending
    if faces.numel():
        faces = faces[_front_faces(verts2d, faces)]

    # extra all-ones channel with zero background measures foreground weight
    attrs_ext = torch.cat([attrs, torch.ones(attrs.shape[0], 1, dtype=DTYPE)], dim=1)
    bg_ext = torch.cat([bg, torch.zeros(1, dtype=DTYPE)])

    if method == "auto":
        method = "dense" if faces.shape[0] * width * height <= config.dense_budget else "sparse"
    if method == "dense":
        out = _soft_dense(verts2d, z, faces, attrs_ext, bg_ext, width, height, config)
    elif method == "sparse":
        out = _soft_sparse(verts2d, z, faces, attrs_ext, bg_ext, width, height, config)
    else:
        raise ValueError(f"unknown method {method!r}")
    return SoftRender(image=out[..., :n_chan], silhouette=out[..., n_chan])


def rasterize_soft_vjp(cotangent: Tensor, verts2d: Tensor, z: Tensor, faces: Tensor,
                       attrs: Tensor, width: int, height: int,
                       config: RasterConfig = RasterConfig(),
                       background: Tensor | None = None,
                       method: str = "auto") -> tuple[Tensor, Tensor, Tensor]:
    """Pull an (H, W, C) cotangent back to (d verts2d, d z, d attrs)."""
    v = torch.as_tensor(verts2d, dtype=DTYPE).detach().requires_grad_(True)
    zz = torch.as_tensor(z, dtype=DTYPE).detach().requires_grad_(True)
    aa = torch.as_tensor(attrs, dtype=DTYPE).detach().requires_grad_(True)
    out = rasterize_soft(v, zz, faces, aa, width, height, config, background, method)
    ct = torch.as_tensor(cotangent, dtype=DTYPE)
    if ct.shape != out.image.shape:
        raise ValueError(f"cotangent must be {tuple(out.image.shape)}")
    g = torch.autograd.grad(out.image, [v, zz, aa], grad_outputs=ct, allow_unused=True)
    zero = lambda t, ref: t if t is not None else torch.zeros_like(ref)
    return zero(g[0], v), zero(g[1], zz), zero(g[2], aa)


def rasterize_hard(verts2d: Tensor, z: Tensor, faces: Tensor, width: int, height: int,
                   config: RasterConfig = RasterConfig()) -> HardRender:
    """Exact visibility: per pixel the nearest covering face (inclusive edges).

    Ties on interpolated depth go to the lowest face index. Not differentiable;
    runs under no_grad.
    """
    verts2d = torch.as_tensor(verts2d, dtype=DTYPE).detach()
    z = torch.as_tensor(z, dtype=DTYPE).detach()
    faces = torch.as_tensor(faces, dtype=torch.int64)
    _check_screen_inputs(verts2d, z, faces)
    if faces.numel():
        keep = _front_faces(verts2d, faces)
        face_ids = torch.nonzero(keep, as_tuple=True)[0]
        faces = faces[keep]
    else:
        face_ids = torch.arange(faces.shape[0])

    face_index = torch.full((height, width), SENTINEL_NONE, dtype=torch.int64)
    depth = torch.full((height, width), config.far, dtype=DTYPE)
    bary = torch.zeros(height, width, 3, dtype=DTYPE)
    if faces.shape[0] == 0:
        return HardRender(face_index, depth, bary)

    with torch.no_grad():
        f_np, p_np = _candidate_pairs(verts2d.numpy(), faces.numpy(), width, height, 0.0)
        if len(f_np) == 0:
            return HardRender(face_index, depth, bary)
        f_idx = torch.from_numpy(f_np)
        p_idx = torch.from_numpy(p_np)
        gx, gy = pixel_centers_normalized(width, height)
        tri = verts2d[faces][f_idx]
        triz = z[faces][f_idx]
        px = gx.reshape(-1)[p_idx]
        py = gy.reshape(-1)[p_idx]

        ax, ay = tri[:, 0, 0], tri[:, 0, 1]
        bx, by = tri[:, 1, 0], tri[:, 1, 1]
        cx, cy = tri[:, 2, 0], tri[:, 2, 1]
        ea = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        eb = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        ec = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        inside = torch.where(area > 0, (ea >= 0) & (eb >= 0) & (ec >= 0),
                             (ea <= 0) & (eb <= 0) & (ec <= 0))
        inside &= area.abs() >= _DEGENERATE_AREA
        if not bool(inside.any()):
            return HardRender(face_index, depth, bary)
        f_idx, p_idx = f_idx[inside], p_idx[inside]
        lam = torch.stack([ea[inside], eb[inside], ec[inside]], dim=-1) / area[inside, None]
        zbar = (lam * triz[inside]).sum(-1)

        order = np.lexsort((f_idx.numpy(), zbar.numpy(), p_idx.numpy()))
        p_sorted = p_idx.numpy()[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = p_sorted[1:] != p_sorted[:-1]
        win = torch.from_numpy(order[first])

        rows = p_idx[win] // width
        cols = p_idx[win] % width
        face_index[rows, cols] = face_ids[f_idx[win]]
        depth[rows, cols] = zbar[win]
        bary[rows, cols] = lam[win]
    return HardRender(face_index, depth, bary)


def visible_vertices(hard: HardRender, faces: Tensor, num_vertices: int) -> Tensor:
    """Boolean (V,): vertex belongs to at least one pixel-winning face."""
    faces = torch.as_tensor(faces, dtype=torch.int64)
    seen = hard.face_index[hard.face_index != SENTINEL_NONE]
    out = torch.zeros(num_vertices, dtype=torch.bool)
    if seen.numel():
        out[faces[seen.unique()].reshape(-1)] = True
    return out


def render_semantic_channels(verts2d: Tensor, z: Tensor, faces: Tensor,
                             prior_rows: Tensor, visible: Tensor,
                             width: int, height: int,
                             config: RasterConfig = RasterConfig(),
                             background: Tensor | None = None,
                             method: str = "auto") -> SoftRender:
    """Soft-render per-vertex probability rows, zeroing occluded vertices.

    `visible` usually comes from visible_vertices on a hard pass of the same
    geometry; rows of invisible vertices contribute nothing to any channel.
    """
    vis = torch.as_tensor(visible)
    if vis.shape != verts2d.shape[:1]:
        raise ValueError("visible must be (V,)")
    attrs = torch.as_tensor(prior_rows, dtype=DTYPE) * vis.to(DTYPE)[:, None]
    return rasterize_soft(verts2d, z, faces, attrs, width, height, config,
                          background, method)
