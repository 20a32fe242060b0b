"""Procedural humanoid template used by fixtures, demos, and experiments.

Deterministic construction, no RNG: one tube of octagonal rings per bone of
the 24-joint tree, a capped pelvis ring, a ball skull. Hands end in flat
paddles and feet in long flat toe boxes so that wrist, ankle, and forearm
rotations change the silhouette instead of spinning a rotationally symmetric
blob in place. Axes follow the package convention (y down, z away from the
camera), so the figure stands head-up at y < 0 and the toes point toward the
camera.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from dsr.body import DEFAULT_PARENTS, NUM_JOINTS, NUM_SHAPE, BodyTemplate

PART_NAMES = ("torso", "head", "left_arm", "right_arm", "left_leg", "right_leg")
TORSO, HEAD, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = range(6)

# Rest-pose joint positions, meters. T-pose, person's left at +x.
JOINT_POSITIONS = np.array([
    (0.00, 0.00, 0.00),    # 0  pelvis
    (0.09, 0.02, 0.00),    # 1  left hip
    (-0.09, 0.02, 0.00),   # 2  right hip
    (0.00, -0.10, 0.00),   # 3  spine low
    (0.10, 0.45, 0.00),    # 4  left knee
    (-0.10, 0.45, 0.00),   # 5  right knee
    (0.00, -0.22, 0.00),   # 6  spine mid
    (0.11, 0.85, 0.00),    # 7  left ankle
    (-0.11, 0.85, 0.00),   # 8  right ankle
    (0.00, -0.34, 0.00),   # 9  chest
    (0.12, 0.92, -0.10),   # 10 left toes
    (-0.12, 0.92, -0.10),  # 11 right toes
    (0.00, -0.46, 0.00),   # 12 neck
    (0.06, -0.40, 0.00),   # 13 left collar
    (-0.06, -0.40, 0.00),  # 14 right collar
    (0.00, -0.56, 0.00),   # 15 head
    (0.17, -0.42, 0.00),   # 16 left shoulder
    (-0.17, -0.42, 0.00),  # 17 right shoulder
    (0.42, -0.40, 0.00),   # 18 left elbow
    (-0.42, -0.40, 0.00),  # 19 right elbow
    (0.66, -0.38, 0.00),   # 20 left wrist
    (-0.66, -0.38, 0.00),  # 21 right wrist
    (0.74, -0.37, 0.00),   # 22 left hand
    (-0.74, -0.37, 0.00),  # 23 right hand
], dtype=np.float64)

JOINT_PART = {
    0: TORSO, 3: TORSO, 6: TORSO, 9: TORSO, 12: TORSO, 13: TORSO, 14: TORSO,
    15: HEAD,
    16: LEFT_ARM, 18: LEFT_ARM, 20: LEFT_ARM, 22: LEFT_ARM,
    17: RIGHT_ARM, 19: RIGHT_ARM, 21: RIGHT_ARM, 23: RIGHT_ARM,
    1: LEFT_LEG, 4: LEFT_LEG, 7: LEFT_LEG, 10: LEFT_LEG,
    2: RIGHT_LEG, 5: RIGHT_LEG, 8: RIGHT_LEG, 11: RIGHT_LEG,
}

# Tube radius of the bone that ends at each joint.
_BONE_RADIUS = {
    1: 0.050, 2: 0.050, 3: 0.085, 4: 0.055, 5: 0.055, 6: 0.090,
    7: 0.045, 8: 0.045, 9: 0.085, 10: 0.035, 11: 0.035, 12: 0.060,
    13: 0.045, 14: 0.045, 15: 0.035, 16: 0.040, 17: 0.040, 18: 0.035,
    19: 0.035, 20: 0.030, 21: 0.030, 22: 0.025, 23: 0.025,
}

_RING_SPACING = 0.07
# Leaf tips: length past the leaf joint and the two cross-section radii in
# the ring frame (u, v). Hands are thin across the palm and wide toward the
# camera; feet are wide side to side and thin top to bottom.
_LEAF_TIPS = {
    10: (0.11, 0.050, 0.022),
    11: (0.11, 0.050, 0.022),
    22: (0.10, 0.014, 0.050),
    23: (0.10, 0.014, 0.050),
}
_HEAD_JOINT = 15


def _ring_frame(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


class _MeshBuilder:
    def __init__(self, ring_size: int) -> None:
        self.ring_size = ring_size
        self.verts: list[np.ndarray] = []
        self.faces: list[tuple[int, int, int]] = []
        self.weights: list[dict[int, float]] = []
        self.parts: list[int] = []

    def add_ring(self, center: np.ndarray, radius: float | tuple[float, float],
                 u: np.ndarray, v: np.ndarray,
                 weight: dict[int, float], part: int) -> list[int]:
        ru, rv = (radius, radius) if isinstance(radius, float) else radius
        ids = []
        for k in range(self.ring_size):
            phi = 2.0 * math.pi * k / self.ring_size
            ids.append(len(self.verts))
            self.verts.append(center + ru * math.cos(phi) * u + rv * math.sin(phi) * v)
            self.weights.append(dict(weight))
            self.parts.append(part)
        return ids

    def add_point(self, point: np.ndarray, weight: dict[int, float], part: int) -> int:
        self.verts.append(np.asarray(point, dtype=np.float64))
        self.weights.append(dict(weight))
        self.parts.append(part)
        return len(self.verts) - 1

    def connect(self, ring_a: list[int], ring_b: list[int]) -> None:
        n = self.ring_size
        for k in range(n):
            a0, a1 = ring_a[k], ring_a[(k + 1) % n]
            b0, b1 = ring_b[k], ring_b[(k + 1) % n]
            self.faces.append((a0, a1, b1))
            self.faces.append((a0, b1, b0))

    def fan(self, ring: list[int], apex: int) -> None:
        n = self.ring_size
        for k in range(n):
            self.faces.append((ring[k], ring[(k + 1) % n], apex))


def build_humanoid(ring_size: int = 8) -> BodyTemplate:
    """Build the default articulated template (about 700 vertices at ring_size=8).

    Skinning: a ring at parameter t along bone p->j carries weight t/2 on j and
    1 - t/2 on p, so geometry right at a joint is shared half/half and leaf
    rotations swing only the tip geometry beyond the leaf joint. The joint
    regressor reads each joint position as the mean of the ring centered on it.
    """
    if ring_size < 3:
        raise ValueError("ring_size must be at least 3")
    joints = JOINT_POSITIONS
    parents = list(DEFAULT_PARENTS)
    b = _MeshBuilder(ring_size)
    regress_rings: dict[int, list[int]] = {}

    # Pelvis: horizontal ring plus cap; anchors the root joint regression.
    u0, v0 = _ring_frame(np.array([0.0, 1.0, 0.0]))
    pelvis_ring = b.add_ring(joints[0], 0.07, u0, v0, {0: 1.0}, TORSO)
    pelvis_center = b.add_point(joints[0], {0: 1.0}, TORSO)
    b.fan(pelvis_ring, pelvis_center)
    regress_rings[0] = pelvis_ring

    for j in range(1, NUM_JOINTS):
        p = parents[j]
        start, end = joints[p], joints[j]
        direction = end - start
        length = float(np.linalg.norm(direction))
        u, v = _ring_frame(direction)
        radius = _BONE_RADIUS[j]
        part = JOINT_PART[j]
        n_rings = 2 + max(0, round(length / _RING_SPACING) - 1)
        prev = None
        for r in range(n_rings):
            t = r / (n_rings - 1)
            center = start + t * direction
            weight = {p: 1.0 - 0.5 * t, j: 0.5 * t} if t > 0 else {p: 1.0}
            ring = b.add_ring(center, radius, u, v, weight, part)
            if prev is not None:
                b.connect(prev, ring)
            prev = ring
        regress_rings[j] = prev

        if j in _LEAF_TIPS:
            # closed flat paddle past the leaf joint, fully driven by the leaf
            tip_len, ru, rv = _LEAF_TIPS[j]
            d_unit = direction / length
            last = prev
            for frac, taper in ((0.35, 1.0), (0.75, 0.85)):
                ring = b.add_ring(end + frac * tip_len * d_unit,
                                  (ru * taper, rv * taper), u, v, {j: 1.0}, part)
                b.connect(last, ring)
                last = ring
            apex = b.add_point(end + tip_len * d_unit, {j: 1.0}, part)
            b.fan(last, apex)
        elif j == _HEAD_JOINT:
            # skull: widening then closing rings beyond the head joint
            d_unit = direction / length
            last = prev
            for frac, r_scale in ((0.25, 2.2), (0.55, 2.5), (0.85, 1.7)):
                ring = b.add_ring(end + frac * 0.20 * d_unit, radius * r_scale, u, v,
                                  {j: 1.0}, HEAD)
                b.connect(last, ring)
                last = ring
            apex = b.add_point(end + 0.20 * d_unit, {j: 1.0}, HEAD)
            b.fan(last, apex)

    verts = np.asarray(b.verts)
    n_verts = len(verts)

    weights = np.zeros((n_verts, NUM_JOINTS))
    for i, w in enumerate(b.weights):
        for jid, val in w.items():
            weights[i, jid] = val
    weights /= weights.sum(axis=1, keepdims=True)

    regressor = np.zeros((NUM_JOINTS, n_verts))
    for j, ring in regress_rings.items():
        regressor[j, ring] = 1.0 / len(ring)

    shape_dirs = _shape_basis(verts, np.asarray(b.parts))

    return BodyTemplate(
        vertices=torch.from_numpy(verts),
        faces=torch.tensor(b.faces, dtype=torch.int64),
        joint_regressor=torch.from_numpy(regressor),
        skin_weights=torch.from_numpy(weights),
        shape_dirs=torch.from_numpy(shape_dirs),
        part_labels=torch.tensor(b.parts, dtype=torch.int64),
    )


def _shape_basis(verts: np.ndarray, parts: np.ndarray) -> np.ndarray:
    """Fixed per-vertex displacement directions, one (V, 3) slab per coefficient."""
    v = verts
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zeros = np.zeros_like(x)
    arm = ((parts == LEFT_ARM) | (parts == RIGHT_ARM)).astype(np.float64)
    leg = ((parts == LEFT_LEG) | (parts == RIGHT_LEG)).astype(np.float64)
    head = (parts == HEAD).astype(np.float64)

    basis = np.zeros((len(v), 3, NUM_SHAPE))
    basis[:, :, 0] = 0.05 * v                                        # overall size
    basis[:, :, 1] = np.stack([zeros, 0.06 * y, zeros], axis=1)      # height
    basis[:, :, 2] = np.stack([0.04 * x, zeros, 0.04 * z], axis=1)   # girth
    torso_w = np.exp(-(((y + 0.20) / 0.25) ** 2))
    basis[:, :, 3] = np.stack([0.05 * x * torso_w, zeros, 0.05 * z * torso_w], axis=1)
    basis[:, :, 4] = np.stack([zeros, 0.08 * np.maximum(y, 0.0) * leg, zeros], axis=1)
    basis[:, :, 5] = np.stack([0.06 * np.sign(x) * np.maximum(np.abs(x) - 0.15, 0.0) * arm,
                               zeros, zeros], axis=1)
    basis[:, :, 6] = 0.05 * head[:, None] * (v - np.array([0.0, -0.56, 0.0]))
    shoulder_w = np.exp(-(((y + 0.41) / 0.08) ** 2))
    basis[:, :, 7] = np.stack([0.04 * np.sign(x) * shoulder_w, zeros, zeros], axis=1)
    belly_w = np.exp(-((y / 0.20) ** 2))
    basis[:, :, 8] = np.stack([zeros, zeros, -0.04 * belly_w], axis=1)
    basis[:, :, 9] = np.stack([0.02 * np.sin(7.0 * y), zeros, 0.02 * np.cos(7.0 * y)], axis=1)
    return basis
