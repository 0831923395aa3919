"""The discretized volume around the subject and metric <-> voxel transforms.

Voxel ``(a, b, c)`` covers ``[a, a+1) x [b, b+1) x [c, c+1)`` in continuous
voxel coordinates, so voxel centers sit at half-integers. ``i`` follows
image u, ``j`` follows image v, and ``k`` grows with distance from the camera.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInput, NonPositiveDepth
from .skeleton import backproject

logger = logging.getLogger(__name__)

LADDER_DEPTHS = (1, 2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class VoxelGrid:
    w: int
    h: int
    d: int
    bbox: tuple = (0.0, 0.0, 1.0, 1.0)
    z_center: float = 0.0
    z_half_range: float = 1000.0

    def __post_init__(self):
        if min(self.w, self.h, self.d) < 1:
            raise ValueError("grid dimensions must be >= 1")
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise ValueError("bbox width and height must be positive")
        if not self.z_half_range > 0:
            raise ValueError("z_half_range must be positive")

    @property
    def shape(self):
        return (self.w, self.h, self.d)

    def with_depth(self, d):
        return replace(self, d=int(d))

    def to_json(self):
        return {"w": self.w, "h": self.h, "d": self.d, "z_half_range_mm": self.z_half_range}


def metric_to_voxel(grid, joint_px, joint_z):
    """Map image coordinates (px) and absolute depth (mm) to continuous voxel coordinates.

    Works on a single joint or on arrays of shape (N, 2) / (N,). Results
    outside the grid are returned as-is.
    """
    uv = np.asarray(joint_px, dtype=np.float64)
    z = np.asarray(joint_z, dtype=np.float64)
    bx, by, bw, bh = grid.bbox
    i = (uv[..., 0] - bx) / bw * grid.w
    j = (uv[..., 1] - by) / bh * grid.h
    k = (z - (grid.z_center - grid.z_half_range)) / (2.0 * grid.z_half_range) * grid.d
    return np.stack([i, j, k], axis=-1)


def voxel_to_metric(grid, vc):
    """Exact inverse of :func:`metric_to_voxel`; returns ``(uv_px, z_mm)``."""
    vc = np.asarray(vc, dtype=np.float64)
    bx, by, bw, bh = grid.bbox
    u = vc[..., 0] / grid.w * bw + bx
    v = vc[..., 1] / grid.h * bh + by
    z = vc[..., 2] / grid.d * (2.0 * grid.z_half_range) + (grid.z_center - grid.z_half_range)
    return np.stack([u, v], axis=-1), z


def lift_to_3d(grid, vc, focal, principal_point):
    """Decoded voxel coordinates -> metric camera-frame points (mm)."""
    uv, z = voxel_to_metric(grid, vc)
    if np.any(np.asarray(z) <= 0):
        raise NonPositiveDepth("recovered absolute depth must be positive")
    out = backproject(np.atleast_2d(uv), np.atleast_1d(z), focal, principal_point)
    return out if np.ndim(vc) > 1 else out[0]


def clip_to_grid(grid, vc):
    """Move out-of-range coordinates onto the boundary voxel center.

    Returns the clipped array and how many joints were touched.
    """
    vc = np.array(vc, dtype=np.float64, copy=True)
    hi = np.array([grid.w, grid.h, grid.d], dtype=np.float64)
    below = vc < 0.0
    above = vc >= hi
    vc = np.where(below, 0.5, vc)
    vc = np.where(above, hi - 0.5, vc)
    touched = int(np.any(below | above, axis=-1).sum())
    if touched:
        logger.debug("clipped %d joint(s) into the grid", touched)
    return vc, touched


def _limb_sum(uv, rel_z, bones, z_root, focal, principal_point):
    z = z_root + rel_z
    cx, cy = principal_point
    x = (uv[:, 0] - cx) * z / focal
    y = (uv[:, 1] - cy) * z / focal
    total = 0.0
    for c, p in bones:
        total += math.sqrt((x[c] - x[p]) ** 2 + (y[c] - y[p]) ** 2 + (z[c] - z[p]) ** 2)
    return total


def root_depth_objective(z_root, pose_px, decoded_rel_z, skeleton, focal, principal_point):
    """Squared mismatch between reconstructed and reference total limb length."""
    uv = np.asarray(pose_px.coords if hasattr(pose_px, "coords") else pose_px, dtype=np.float64)
    s = _limb_sum(uv, np.asarray(decoded_rel_z, dtype=np.float64), skeleton.bones, z_root,
                  focal, principal_point)
    return (s - skeleton.total_limb_length) ** 2


def estimate_root_depth(pose_px, decoded_rel_z, skeleton, focal, principal_point,
                        z_min=500.0, z_max=10000.0, tol=1.0):
    """Root depth (mm) whose lifted skeleton best matches the reference size.

    Golden-section search over ``[z_min, z_max]`` until the bracket is
    narrower than ``tol``. The lower end is raised if needed so that every
    lifted joint stays in front of the camera.
    """
    if not skeleton.bones:
        raise DegenerateInput("skeleton has no limbs")
    uv = np.asarray(pose_px.coords if hasattr(pose_px, "coords") else pose_px, dtype=np.float64)
    if np.allclose(uv, uv[0]):
        raise DegenerateInput("all joints project to a single point")
    rel_z = np.asarray(decoded_rel_z, dtype=np.float64)
    bones = skeleton.bones
    target = skeleton.total_limb_length

    def f(z):
        return (_limb_sum(uv, rel_z, bones, z, focal, principal_point) - target) ** 2

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = max(float(z_min), tol - float(rel_z.min())), float(z_max)
    if a >= b:
        raise DegenerateInput("no root depth in range keeps every joint in front of the camera")
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)
