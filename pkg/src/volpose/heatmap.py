"""Volumetric gaussian targets, the coarse-to-fine ladder, decoding and losses."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .voxelgrid import LADDER_DEPTHS

DEFAULT_SIGMA = 2.0
DEFAULT_SOFT_WINDOW = 6
ZERO_BELOW = 1e-8

VOLUME_MAGIC = b"VOLH"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4s5I")


def peak_value(sigma=DEFAULT_SIGMA):
    # the 2D normalizer is used in 3D as well, on purpose
    return 1.0 / (2.0 * np.pi * sigma ** 2)


@dataclass
class HeatmapVolume:
    """Channel-packed likelihoods: ``data[i, j, n*d + k]``, shape (w, h, d*N)."""

    data: np.ndarray
    d: int
    n_joints: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != self.d * self.n_joints:
            raise ShapeMismatch(
                f"volume of shape {self.data.shape} cannot hold {self.n_joints} joints at d={self.d}"
            )

    @property
    def w(self):
        return self.data.shape[0]

    @property
    def h(self):
        return self.data.shape[1]

    def block(self, n):
        return self.data[:, :, n * self.d:(n + 1) * self.d]

    def to_chw(self):
        """(d*N, h, w) view matching the network's NCHW layout."""
        return self.data.transpose(2, 1, 0)

    @classmethod
    def from_chw(cls, chw, d, n_joints):
        return cls(np.asarray(chw).transpose(2, 1, 0), d, n_joints)


def validate_ladder(ladder):
    ladder = tuple(int(v) for v in ladder)
    if not ladder:
        raise ValueError("ladder must have at least one stage")
    if any(v not in LADDER_DEPTHS for v in ladder):
        raise ValueError(f"ladder entries must be in {LADDER_DEPTHS}, got {ladder}")
    if any(b < a for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"ladder must be nondecreasing, got {ladder}")
    return ladder


def synth_target(grid, pose_vox, sigma=DEFAULT_SIGMA, n_joints=None):
    """Gaussian target around each joint's continuous voxel position.

    Samples are taken at voxel centers. A ``d == 1`` grid drops the depth
    term, leaving a plain 2D heatmap per joint.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    pv = np.asarray(pose_vox, dtype=np.float64).reshape(-1, 3)
    n = pv.shape[0]
    if n_joints is not None and n != n_joints:
        raise ShapeMismatch(f"pose has {n} joints, expected {n_joints}")
    two_s2 = 2.0 * sigma ** 2

    def axis(coord, size):
        centers = np.arange(size, dtype=np.float64) + 0.5
        return np.exp(-((coord[:, None] - centers[None, :]) ** 2) / two_s2)

    gx = axis(pv[:, 0], grid.w)
    gy = axis(pv[:, 1], grid.h)
    gz = axis(pv[:, 2], grid.d) if grid.d > 1 else np.ones((n, 1))
    vol = peak_value(sigma) * gx[:, :, None, None] * gy[:, None, :, None] * gz[:, None, None, :]
    vol[vol < ZERO_BELOW] = 0.0
    data = vol.transpose(1, 2, 0, 3).reshape(grid.w, grid.h, n * grid.d)
    return HeatmapVolume(np.ascontiguousarray(data), grid.d, n)


def downsample_ladder(target64, ladder, grid, pose_vox, sigma=DEFAULT_SIGMA):
    """Per-stage targets, synthesized directly at each stage's depth resolution.

    ``target64`` is the full-resolution target and is reused for stages at
    the grid's own depth.
    """
    ladder = validate_ladder(ladder)
    pv = np.asarray(pose_vox, dtype=np.float64).reshape(-1, 3)
    out = []
    for ds in ladder:
        if ds == grid.d and target64 is not None:
            out.append(target64)
            continue
        scaled = pv.copy()
        scaled[:, 2] *= ds / grid.d
        out.append(synth_target(grid.with_depth(ds), scaled, sigma))
    return out


def _as_volume(vol, grid=None):
    if isinstance(vol, HeatmapVolume):
        if grid is not None and (vol.w, vol.h, vol.d) != (grid.w, grid.h, grid.d):
            raise ShapeMismatch("volume does not match grid")
        return vol
    if grid is None:
        raise ValueError("a grid is needed to interpret a raw array")
    data = np.asarray(vol)
    return HeatmapVolume(data, grid.d, data.shape[2] // grid.d)


def decode_argmax(vol, grid=None):
    """Center of the maximal voxel per joint, ties to the lowest (k, j, i)."""
    vol = _as_volume(vol, grid)
    out = np.empty((vol.n_joints, 3))
    for n in range(vol.n_joints):
        kji = vol.block(n).transpose(2, 1, 0)
        k, j, i = np.unravel_index(int(np.argmax(kji)), kji.shape)
        out[n] = (i + 0.5, j + 0.5, k + 0.5)
    return out


def decode_soft(vol, grid=None, window=DEFAULT_SOFT_WINDOW):
    """Local expectation of voxel centers around the hard argmax.

    Negative responses are clamped to zero; if the cube holds less than
    1e-12 mass the hard argmax is returned.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    vol = _as_volume(vol, grid)
    hard = decode_argmax(vol)
    out = hard.copy()
    for n in range(vol.n_joints):
        blk = vol.block(n)
        center = np.floor(hard[n]).astype(int)
        lo = np.maximum(center - window, 0)
        hi = np.minimum(center + window + 1, blk.shape)
        cube = np.clip(blk[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], 0.0, None)
        mass = cube.sum()
        if mass < 1e-12:
            continue
        for ax in range(3):
            centers = np.arange(lo[ax], hi[ax]) + 0.5
            marginal = cube.sum(axis=tuple(a for a in range(3) if a != ax))
            out[n, ax] = float(marginal @ centers) / mass
    return out


def loss_volume(pred, target):
    """Summed squared error over joints and voxels, divided by batch size when batched.

    Arrays of rank 4 are treated as (batch, ...). A :class:`~volpose.autonet.Tensor`
    prediction yields a differentiable tensor loss.
    """
    from .autonet import Tensor, ops

    if isinstance(target, HeatmapVolume):
        target = target.data
    if isinstance(pred, Tensor):
        t = np.asarray(target, dtype=pred.value.dtype)
        if t.shape != pred.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs target {t.shape}")
        return ops.squared_error(pred, t, scale=1.0 / pred.shape[0])
    if isinstance(pred, HeatmapVolume):
        pred = pred.data
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    batch = p.shape[0] if p.ndim == 4 else 1
    return float(np.sum((p - t) ** 2) / batch)


def loss_volume_grad(pred, target):
    p = np.asarray(pred.data if isinstance(pred, HeatmapVolume) else pred, dtype=np.float64)
    t = np.asarray(target.data if isinstance(target, HeatmapVolume) else target, dtype=np.float64)
    batch = p.shape[0] if p.ndim == 4 else 1
    return 2.0 * (p - t) / batch


def loss_coords(pred, gt):
    """Sum over joints of squared Euclidean error; per-sample mean when batched."""
    from .autonet import Tensor, ops

    if isinstance(pred, Tensor):
        t = np.asarray(gt, dtype=pred.value.dtype).reshape(pred.shape)
        return ops.squared_error(pred, t, scale=1.0 / pred.shape[0])
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs groundtruth {g.shape}")
    batch = p.shape[0] if p.ndim == 3 else 1
    return float(np.sum((p - g) ** 2) / batch)


def loss_coords_grad(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    batch = p.shape[0] if p.ndim == 3 else 1
    return 2.0 * (p - g) / batch


def write_volume(path, vol):
    """Little-endian float32 dump; rows ordered j-major, then i, then packed channel."""
    w, h, c = vol.data.shape
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, w, h, vol.d, vol.n_joints)
    body = np.ascontiguousarray(vol.data.transpose(1, 0, 2), dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def read_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated volume header")
    magic, version, w, h, d, n = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise ValueError(f"unsupported volume version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != w * h * d * n:
        raise ShapeMismatch("volume payload size disagrees with header")
    data = body.reshape(h, w, d * n).transpose(1, 0, 2).astype(np.float32)
    return HeatmapVolume(np.ascontiguousarray(data), d, n)
