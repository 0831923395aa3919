"""Synthetic joint-evidence images: the network's stand-in for photographs.

Joints become gaussian blobs whose brightness encodes depth relative to the
root (nearer is brighter), limbs become shaded strokes, and left/right
joints get different blob sizes so that sides stay distinguishable.
Gaussian pixel noise is added from a per-sample seed.
"""
import numpy as np

from . import _kernels

BLOB_SIGMA = {"center": 1.2, "left": 0.8, "right": 1.8}
DEPTH_GAIN_MM = 1000.0
NOISE_STD = 0.05


def joint_sides(skeleton):
    lr = skeleton.left_right_map
    return ["center" if lr[j] == j else ("left" if j < lr[j] else "right")
            for j in range(skeleton.n_joints)]


def depth_shading(rel_z):
    return np.clip(1.0 - np.asarray(rel_z) / DEPTH_GAIN_MM, 0.2, 2.0)


def render_evidence(skeleton, pose3d, pose2d, size=64, noise_seed=None, noise_std=NOISE_STD):
    """Render a (size, size) float32 image of the pose cropped to ``pose2d.bbox``."""
    bx, by, bw, bh = pose2d.bbox
    cu = (pose2d.coords[:, 0] - bx) / bw * size
    cv = (pose2d.coords[:, 1] - by) / bh * size
    rel_z = pose3d.coords[:, 2] - pose3d.coords[skeleton.root_index, 2]
    amp = depth_shading(rel_z)
    sig = np.array([BLOB_SIGMA[s] for s in joint_sides(skeleton)])
    bones = skeleton.bones
    seg_a = np.array([p for _, p in bones], dtype=np.int64)
    seg_b = np.array([c for c, _ in bones], dtype=np.int64)
    img = _kernels.render(size, cu, cv, amp, sig, seg_a, seg_b)
    if noise_seed is not None and noise_std > 0:
        img = img + noise_std * np.random.default_rng(noise_seed).standard_normal(img.shape)
    return img.astype(np.float32)
