"""Differentiable semantic rendering toolkit.

Soft triangle rasterization with clothing-semantics channels, the loss
family built on it, per-vertex label priors, pseudo-ground-truth mask
preparation, and a gradient-based body fitter.
"""

from dsr.body import (
    DTYPE,
    NUM_JOINTS,
    NUM_POSE,
    NUM_SHAPE,
    BodyParams,
    BodyTemplate,
    TriangleMesh,
    forward,
    project,
    project_normalized,
    regress_joints,
    rodrigues,
)
from dsr.raster import RasterConfig, SoftRender, HardRender, rasterize_soft, rasterize_hard

__all__ = [
    "DTYPE",
    "NUM_JOINTS",
    "NUM_POSE",
    "NUM_SHAPE",
    "BodyParams",
    "BodyTemplate",
    "TriangleMesh",
    "forward",
    "project",
    "project_normalized",
    "regress_joints",
    "rodrigues",
    "RasterConfig",
    "SoftRender",
    "HardRender",
    "rasterize_soft",
    "rasterize_hard",
]

__version__ = "0.1.0"
