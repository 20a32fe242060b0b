"""Per-vertex clothing-label prior: counting, flooring, cleaning, aggregation.

The prior is a V x 20 row-stochastic matrix: for each template vertex, the
probability of each segmentation class. It is estimated by hard-rendering
registered meshes against externally produced label images and counting, per
covered pixel, the pixel's label once for each of the three vertices of the
visible face.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from dsr.body import DTYPE
from dsr.raster import RasterConfig, SENTINEL_NONE, mesh_to_screen, rasterize_hard

LABEL_NAMES = (
    "Background", "Hat", "Hair", "Glove", "Sunglasses", "UpperClothes", "Dress",
    "Coat", "Socks", "Pants", "Jumpsuits", "Scarf", "Skirt", "Face", "LeftArm",
    "RightArm", "LeftLeg", "RightLeg", "LeftShoe", "RightShoe",
)
NUM_LABELS = len(LABEL_NAMES)
BACKGROUND = 0

# binary-target classes: body regions reliably skin/shoe in any outfit
MC_LABEL_NAMES = ("LeftArm", "RightArm", "LeftShoe", "RightShoe", "Face")

# 4-way coarse scheme, order fixed: channel 0 must stay Background
COARSE_SCHEME: dict[str, tuple[str, ...]] = {
    "Background": ("Background",),
    "LowerClothes": ("Pants", "Skirt"),
    "UpperClothes": ("UpperClothes", "Dress", "Coat", "Jumpsuits"),
    "MinimalClothing": ("Hat", "Hair", "Glove", "Sunglasses", "Socks", "Scarf",
                        "Face", "LeftArm", "RightArm", "LeftLeg", "RightLeg",
                        "LeftShoe", "RightShoe"),
}

MC_SCHEME: dict[str, tuple[str, ...]] = {
    "Rest": tuple(n for n in LABEL_NAMES if n not in MC_LABEL_NAMES),
    "MinimalBody": MC_LABEL_NAMES,
}

# part name -> fine labels that cannot occur on that part
DEFAULT_INCOMPATIBILITY: dict[str, tuple[str, ...]] = {
    "left_leg": ("LeftArm", "RightArm", "Glove"),
    "right_leg": ("LeftArm", "RightArm", "Glove"),
    "left_arm": ("LeftLeg", "RightLeg", "LeftShoe", "RightShoe", "Socks"),
    "right_arm": ("LeftLeg", "RightLeg", "LeftShoe", "RightShoe", "Socks"),
    "head": ("LeftArm", "RightArm", "LeftLeg", "RightLeg"),
    "torso": (),
}


def label_index(name: str) -> int:
    try:
        return LABEL_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown label {name!r}") from None


@dataclass
class VertexLabelPrior:
    probs: np.ndarray                       # (V, NUM_LABELS)
    labels: tuple[str, ...] = LABEL_NAMES
    eps_bg: float = 0.05

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[1] != len(self.labels):
            raise ValueError(f"probs must be (V, {len(self.labels)})")
        if self.probs.min() < -1e-12 or self.probs.max() > 1 + 1e-12:
            raise ValueError("probabilities must lie in [0, 1]")
        rows = self.probs.sum(axis=1)
        if np.abs(rows - 1.0).max() > 1e-6:
            raise ValueError("prior rows must sum to 1 within 1e-6")

    @property
    def num_vertices(self) -> int:
        return self.probs.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.probs[:, label_index(name)]


@dataclass
class ScanObservation:
    """One labeled view: a posed registered mesh, its camera, a label image."""

    vertices: np.ndarray        # (V, 3) posed positions
    faces: np.ndarray           # (F, 3)
    camera: np.ndarray          # (s, tx, ty)
    label_image: np.ndarray     # (H, W) uint8 class ids

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.camera = np.asarray(self.camera, dtype=np.float64)
        self.label_image = np.asarray(self.label_image)
        if self.label_image.ndim != 2:
            raise ValueError("label_image must be 2-D")
        if self.label_image.max(initial=0) >= NUM_LABELS:
            raise ValueError("label id outside [0, 19]")
        if not np.isfinite(self.vertices).all() or not np.isfinite(self.camera).all():
            raise ValueError("non-finite scan geometry")


def accumulate_counts(obs: ScanObservation, counts: np.ndarray,
                      config: RasterConfig = RasterConfig()) -> np.ndarray:
    """Add one observation's per-pixel label evidence into `counts` (in place).

    Hard-rasterizes the mesh at the label image's resolution; every covered
    pixel increments counts[v, label(pixel)] for all three vertices v of the
    visible face there. Covered pixels labeled Background do count toward the
    Background column (normalize_counts ignores that column's total).
    """
    counts = np.asarray(counts)
    if counts.shape != (len(obs.vertices), NUM_LABELS):
        raise ValueError(f"counts must be ({len(obs.vertices)}, {NUM_LABELS})")
    if counts.dtype != np.int64:
        raise ValueError("counts must be int64")
    height, width = obs.label_image.shape
    verts = torch.from_numpy(obs.vertices)
    cam = torch.from_numpy(obs.camera)
    verts2d, z = mesh_to_screen(verts, cam)
    hard = rasterize_hard(verts2d, z, torch.from_numpy(obs.faces), width, height, config)
    fmap = hard.face_index.numpy()
    covered = fmap != SENTINEL_NONE
    if covered.any():
        face_ids = fmap[covered]
        pixel_labels = obs.label_image[covered].astype(np.int64)
        for corner in range(3):
            np.add.at(counts, (obs.faces[face_ids, corner], pixel_labels), 1)
    return counts


def normalize_counts(counts: np.ndarray, eps_bg: float) -> VertexLabelPrior:
    """Counts -> probabilities: garment shares scaled to 1 - eps_bg, bg = eps_bg.

    Garment share = count / total non-background count for that vertex; rows
    with no non-background evidence fall back to the uniform garment
    distribution. The Background column of `counts` never enters the ratio.
    """
    if not 0.0 <= eps_bg < 0.5:
        raise ValueError("eps_bg must lie in [0, 0.5)")
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != NUM_LABELS:
        raise ValueError(f"counts must be (V, {NUM_LABELS})")
    garment = c.copy()
    garment[:, BACKGROUND] = 0.0
    totals = garment.sum(axis=1, keepdims=True)
    n_garment = NUM_LABELS - 1
    shares = np.where(totals > 0, garment / np.where(totals > 0, totals, 1.0),
                      1.0 / n_garment)
    shares[:, BACKGROUND] = 0.0
    probs = shares * (1.0 - eps_bg)
    probs[:, BACKGROUND] = eps_bg
    return VertexLabelPrior(probs, eps_bg=eps_bg)


def clean_with_part_segmentation(prior: VertexLabelPrior, part_labels,
                                 incompatibility: dict[int, tuple[int, ...]] | None = None,
                                 part_names: tuple[str, ...] | None = None
                                 ) -> VertexLabelPrior:
    """Zero labels a vertex's body part cannot carry; rescale garment mass.

    The background share of each row is preserved exactly. A row whose entire
    garment mass was forbidden becomes uniform over its allowed garment labels
    (with a warning). `incompatibility` maps part id -> forbidden label ids;
    when omitted, DEFAULT_INCOMPATIBILITY is resolved through `part_names`
    (part id -> name).
    """
    parts = np.asarray(part_labels, dtype=np.int64)
    if parts.shape != (prior.num_vertices,):
        raise ValueError("part_labels must be (V,)")
    if incompatibility is None:
        if part_names is None:
            from dsr.humanoid import PART_NAMES
            part_names = PART_NAMES
        incompatibility = {
            pid: tuple(label_index(n) for n in DEFAULT_INCOMPATIBILITY.get(name, ()))
            for pid, name in enumerate(part_names)
        }

    probs = prior.probs.copy()
    warned = 0
    for pid, forbidden in incompatibility.items():
        fb = [f for f in forbidden if f != BACKGROUND]
        if not fb:
            continue
        rows = parts == pid
        if not rows.any():
            continue
        sub = probs[rows]
        bg = sub[:, BACKGROUND].copy()
        sub[:, fb] = 0.0
        sub[:, BACKGROUND] = 0.0
        mass = sub.sum(axis=1, keepdims=True)
        dead = mass[:, 0] <= 0.0
        scale = np.where(mass > 0, (1.0 - bg[:, None]) / np.where(mass > 0, mass, 1.0), 0.0)
        sub *= scale
        if dead.any():
            warned += int(dead.sum())
            allowed = np.ones(NUM_LABELS, dtype=bool)
            allowed[fb] = False
            allowed[BACKGROUND] = False
            uniform = allowed.astype(np.float64) / allowed.sum()
            sub[dead] = uniform[None, :] * (1.0 - bg[dead, None])
        sub[:, BACKGROUND] = bg
        probs[rows] = sub
    if warned:
        warnings.warn(f"cleaning left {warned} vertex rows empty; "
                      "reset to uniform over allowed labels", stacklevel=2)
    return VertexLabelPrior(probs, prior.labels, prior.eps_bg)


def aggregate_labels(prior: VertexLabelPrior, scheme: dict[str, tuple[str, ...]]
                     ) -> np.ndarray:
    """Sum fine probabilities into coarse classes; scheme must partition labels.

    Returns (V, C) with columns ordered as the scheme's keys.
    """
    seen: list[str] = []
    for names in scheme.values():
        seen.extend(names)
    if sorted(seen) != sorted(prior.labels):
        raise ValueError("scheme does not partition the label set")
    member = np.zeros((len(prior.labels), len(scheme)))
    for col, names in enumerate(scheme.values()):
        for n in names:
            member[label_index(n), col] = 1.0
    return prior.probs @ member


def mc_vertex_probability(prior: VertexLabelPrior) -> np.ndarray:
    """(V,) probability that each vertex belongs to the binary-target classes."""
    return aggregate_labels(prior, MC_SCHEME)[:, 1]


def coarse_vertex_probability(prior: VertexLabelPrior) -> np.ndarray:
    """(V, 4) coarse class probabilities in COARSE_SCHEME order."""
    return aggregate_labels(prior, COARSE_SCHEME)


def build_prior(observations, num_vertices: int, eps_bg: float = 0.05,
                part_labels=None, config: RasterConfig = RasterConfig()
                ) -> tuple[VertexLabelPrior, np.ndarray]:
    """Count all observations, normalize, optionally clean. Returns (prior, counts)."""
    counts = np.zeros((num_vertices, NUM_LABELS), dtype=np.int64)
    for obs in observations:
        if len(obs.vertices) != num_vertices:
            raise ValueError("observation vertex count does not match template")
        accumulate_counts(obs, counts, config)
    prior = normalize_counts(counts, eps_bg)
    if part_labels is not None:
        prior = clean_with_part_segmentation(prior, part_labels)
    return prior, counts
