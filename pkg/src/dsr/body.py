"""Articulated body model: LBS mesh, joint regression, weak-perspective camera.

Conventions used throughout the package (stated once):
  * image x to the right, y down, origin top-left
  * z increases away from the camera (larger z = farther)
  * normalized image coordinates span [-1, 1] in both axes; the viewport
    transform maps them to pixel-index coordinates where integer values are
    pixel centers
  * all floating-point math is torch.float64
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

DTYPE = torch.float64

NUM_JOINTS = 24
NUM_POSE = NUM_JOINTS * 3
NUM_SHAPE = 10

# Canonical 24-joint kinematic tree (pelvis root; -1 marks the root).
DEFAULT_PARENTS = (
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
)


def _as_f64(x, shape: tuple[int, ...], name: str) -> Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if tuple(t.shape) != shape:
        raise ValueError(f"{name} must have shape {shape}, got {tuple(t.shape)}")
    return t


@dataclass
class BodyParams:
    """Pose/shape/camera parameter vector driving the mesh.

    Fields:
        theta: (72,) axis-angle pose, 24 joints x 3; theta[0:3] is the global
            rotation.
        beta: (10,) shape coefficients.
        camera: (3,) weak-perspective camera [s, tx, ty] with s > 0.
    """

    theta: Tensor
    beta: Tensor
    camera: Tensor

    def __post_init__(self) -> None:
        self.theta = _as_f64(self.theta, (NUM_POSE,), "theta")
        self.beta = _as_f64(self.beta, (NUM_SHAPE,), "beta")
        self.camera = _as_f64(self.camera, (3,), "camera")
        if not torch.isfinite(self.theta).all() or not torch.isfinite(self.beta).all():
            raise ValueError("theta/beta must be finite")
        scale = float(self.camera[0].detach())
        if not scale > 0:
            raise ValueError(f"camera scale must be positive, got {scale}")

    @classmethod
    def zero(cls, scale: float = 1.0) -> "BodyParams":
        return cls(torch.zeros(NUM_POSE, dtype=DTYPE), torch.zeros(NUM_SHAPE, dtype=DTYPE),
                   torch.tensor([scale, 0.0, 0.0], dtype=DTYPE))

    def detached(self) -> "BodyParams":
        return replace(self, theta=self.theta.detach().clone(),
                       beta=self.beta.detach().clone(), camera=self.camera.detach().clone())


@dataclass
class TriangleMesh:
    """Triangle mesh: (V, 3) vertices and (F, 3) int64 faces."""

    vertices: Tensor
    faces: Tensor

    def __post_init__(self) -> None:
        self.vertices = torch.as_tensor(self.vertices, dtype=DTYPE)
        self.faces = torch.as_tensor(self.faces, dtype=torch.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {tuple(self.vertices.shape)}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {tuple(self.faces.shape)}")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass
class BodyTemplate:
    """Rest-pose template: geometry, skinning, shape basis, part labels.

    Fields:
        vertices: (V, 3) rest-pose positions, meters.
        faces: (F, 3) vertex indices, counter-clockwise front-facing as seen
            from the camera.
        joint_regressor: (24, V), rows sum to 1.
        skin_weights: (V, 24) row-stochastic skinning weights.
        shape_dirs: (V, 3, 10) shape blendshape basis.
        part_labels: (V,) integer body-part labels (see humanoid.PART_NAMES).
        parents: (24,) kinematic tree, parents[0] == -1.
    """

    vertices: Tensor
    faces: Tensor
    joint_regressor: Tensor
    skin_weights: Tensor
    shape_dirs: Tensor
    part_labels: Tensor
    parents: Tensor = field(default_factory=lambda: torch.tensor(DEFAULT_PARENTS))

    def __post_init__(self) -> None:
        self.vertices = torch.as_tensor(self.vertices, dtype=DTYPE)
        self.faces = torch.as_tensor(self.faces, dtype=torch.int64)
        self.joint_regressor = torch.as_tensor(self.joint_regressor, dtype=DTYPE)
        self.skin_weights = torch.as_tensor(self.skin_weights, dtype=DTYPE)
        self.shape_dirs = torch.as_tensor(self.shape_dirs, dtype=DTYPE)
        self.part_labels = torch.as_tensor(self.part_labels, dtype=torch.int64)
        self.parents = torch.as_tensor(self.parents, dtype=torch.int64)
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def validate(self) -> None:
        v = self.num_vertices
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if self.faces.numel() and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ValueError("face index out of range")
        f = self.faces
        if f.numel() and bool(((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any()):
            raise ValueError("degenerate face (repeated vertex index)")
        if self.joint_regressor.shape != (NUM_JOINTS, v):
            raise ValueError(f"joint_regressor must be ({NUM_JOINTS}, {v})")
        if self.skin_weights.shape != (v, NUM_JOINTS):
            raise ValueError(f"skin_weights must be ({v}, {NUM_JOINTS})")
        if self.shape_dirs.shape != (v, 3, NUM_SHAPE):
            raise ValueError(f"shape_dirs must be ({v}, 3, {NUM_SHAPE})")
        if self.part_labels.shape != (v,):
            raise ValueError(f"part_labels must be ({v},)")
        if self.parents.shape != (NUM_JOINTS,) or int(self.parents[0]) != -1:
            raise ValueError("parents must be (24,) with parents[0] == -1")
        if bool((self.parents[1:] >= torch.arange(1, NUM_JOINTS)).any()):
            raise ValueError("parents must precede their children")
        if bool((self.skin_weights < 0).any()):
            raise ValueError("skin_weights must be non-negative")
        if not torch.allclose(self.skin_weights.sum(1), torch.ones(v, dtype=DTYPE), atol=1e-6):
            raise ValueError("skin_weights rows must sum to 1 within 1e-6")
        if not torch.allclose(self.joint_regressor.sum(1), torch.ones(NUM_JOINTS, dtype=DTYPE), atol=1e-6):
            raise ValueError("joint_regressor rows must sum to 1 within 1e-6")


def _skew(v: Tensor) -> Tensor:
    """(..., 3) -> (..., 3, 3) skew-symmetric matrix."""
    zero = torch.zeros_like(v[..., 0])
    return torch.stack([
        torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
        torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
        torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
    ], dim=-2)


def rodrigues(axis_angle) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrix (..., 3, 3).

    Differentiable everywhere; for ||w|| < 1e-8 the sin/cos coefficients switch
    to their Taylor expansions so the zero vector is safe.
    """
    aa = torch.as_tensor(axis_angle, dtype=DTYPE)
    theta2 = (aa * aa).sum(-1, keepdim=True)
    small = theta2 < 1e-16
    # Evaluate the exact branch at theta=1 where small, so no NaN leaks into
    # grads. The guard must also cover the theta2 denominator: dividing by the
    # raw value gives inf at exactly zero, and 0 * inf is NaN in the backward
    # pass of torch.where.
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    sin_c = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    cos_c = torch.where(small, 0.5 - theta2 / 24.0,
                        (1.0 - torch.cos(theta)) / theta2_safe)
    k = _skew(aa)
    eye = torch.eye(3, dtype=DTYPE).expand(k.shape)
    return eye + sin_c[..., None] * k + cos_c[..., None] * (k @ k)


def forward(template: BodyTemplate, params: BodyParams) -> TriangleMesh:
    """Pose the template: shape blendshapes, then linear blend skinning.

    Joint transforms come from rodrigues(theta) chained down the kinematic
    tree; joints are regressed from the shaped rest mesh. Faces are the
    template's. No pose-corrective blendshapes.
    """
    if params.beta.shape[0] != template.shape_dirs.shape[2]:
        raise ValueError("beta length does not match template shape basis")
    v_shaped = template.vertices + torch.einsum("vdk,k->vd", template.shape_dirs, params.beta)
    joints_rest = template.joint_regressor @ v_shaped
    rots = rodrigues(params.theta.view(NUM_JOINTS, 3))

    # Forward kinematics over the (small, fixed) tree.
    world_rot: list[Tensor] = [rots[0]]
    world_pos: list[Tensor] = [joints_rest[0]]
    parents = template.parents.tolist()
    for j in range(1, NUM_JOINTS):
        p = parents[j]
        offset = joints_rest[j] - joints_rest[p]
        world_rot.append(world_rot[p] @ rots[j])
        world_pos.append(world_pos[p] + world_rot[p] @ offset)
    rot = torch.stack(world_rot)                       # (24, 3, 3)
    pos = torch.stack(world_pos)                       # (24, 3)

    # Skinning transform maps the shaped rest mesh: x -> R_j (x - J_j) + p_j.
    trans = pos - torch.einsum("jab,jb->ja", rot, joints_rest)
    vert_rot = torch.einsum("vj,jab->vab", template.skin_weights, rot)
    vert_trans = template.skin_weights @ trans
    posed = torch.einsum("vab,vb->va", vert_rot, v_shaped) + vert_trans
    return TriangleMesh(posed, template.faces)


def regress_joints(mesh: TriangleMesh, template: BodyTemplate) -> Tensor:
    """Joint positions (24, 3) = joint_regressor @ mesh vertices."""
    if mesh.num_vertices != template.joint_regressor.shape[1]:
        raise ValueError(
            f"mesh has {mesh.num_vertices} vertices, regressor expects "
            f"{template.joint_regressor.shape[1]}")
    return template.joint_regressor @ mesh.vertices


def project_normalized(points, camera) -> Tensor:
    """Weak-perspective projection to normalized coords: (x, y) -> s*(x+tx, y+ty)."""
    pts = torch.as_tensor(points, dtype=DTYPE)
    cam = torch.as_tensor(camera, dtype=DTYPE)
    return cam[0] * (pts[..., :2] + cam[1:3])


def project(points, camera, width: int, height: int) -> Tensor:
    """Weak-perspective projection to pixel coordinates (N, 2).

    Normalized coordinates are mapped by the viewport transform: integer pixel
    coordinates are pixel centers, (0, 0) normalized lands on the image center.
    """
    n = project_normalized(points, camera)
    px = (n[..., 0] + 1.0) * (width / 2.0) - 0.5
    py = (n[..., 1] + 1.0) * (height / 2.0) - 0.5
    return torch.stack([px, py], dim=-1)


def pixel_centers_normalized(width: int, height: int) -> tuple[Tensor, Tensor]:
    """Normalized coordinates of all pixel centers: two (H, W) grids (x, y)."""
    xs = (2.0 * (torch.arange(width, dtype=DTYPE) + 0.5)) / width - 1.0
    ys = (2.0 * (torch.arange(height, dtype=DTYPE) + 0.5)) / height - 1.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy
