"""Pose evaluation: root-aligned MPJPE, Procrustes reconstruction error, 3D PCP."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, ShapeMismatch, ZeroLengthPart

# reference values reported for real benchmarks; kept for documentation, never reproduced
REFERENCE_H36M_RECON_ERR_MM = 51.9
REFERENCE_H36M_MPJPE_MM = 71.90
REFERENCE_KTH_PCP = {"upper_arms": 0.96, "lower_arms": 0.83, "upper_legs": 0.98, "lower_legs": 0.88}


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts):
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def _coords(p):
    return np.asarray(getattr(p, "coords", p), dtype=np.float64)


def _check_pair(pred, gt):
    p, g = _coords(pred), _coords(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    return p, g


def mpjpe(pred, gt, root_index=0):
    """Mean joint distance (mm) after moving both roots to the origin.

    Accepts a single (N, 3) pose or a batch (B, N, 3); batches are averaged.
    """
    p, g = _check_pair(pred, gt)
    p = p - p[..., root_index:root_index + 1, :]
    g = g - g[..., root_index:root_index + 1, :]
    return float(np.linalg.norm(p - g, axis=-1).mean())


def svd3(a, sweeps=30, tol=1e-15):
    """One-sided Jacobi SVD of a 3x3 matrix: ``a = u @ diag(s) @ v.T``.

    Singular values come back sorted in decreasing order and ``u``, ``v`` are
    orthogonal (determinant +-1).
    """
    work = np.array(a, dtype=np.float64, copy=True)
    v = np.eye(3)
    for _ in range(sweeps):
        rotated = False
        for p in range(2):
            for q in range(p + 1, 3):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                if abs(beta - alpha) > 1e150 * abs(gamma):
                    t = gamma / (beta - alpha)  # 1/(2 zeta) without overflow
                else:
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = np.sign(zeta) / (abs(zeta) + math.hypot(1.0, zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                work[:, [p, q]] = work[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if not rotated:
            break
    sv = np.linalg.norm(work, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, work, v = sv[order], work[:, order], v[:, order]
    u = np.zeros((3, 3))
    scale = max(sv[0], 1e-300)
    for col in range(3):
        if sv[col] > 1e-12 * scale:
            u[:, col] = work[:, col] / sv[col]
        else:
            u[:, col] = _complete_basis(u[:, :col], col)
    return u, sv, v


def _complete_basis(cols, col):
    if col == 2:
        out = np.cross(cols[:, 0], cols[:, 1])
        return out / np.linalg.norm(out)
    if col == 1:
        e = np.eye(3)[int(np.argmin(np.abs(cols[:, 0])))]
        out = e - (e @ cols[:, 0]) * cols[:, 0]
        return out / np.linalg.norm(out)
    return np.eye(3)[0]


def procrustes_align(pred, gt, strict=True):
    """Least-squares similarity mapping ``pred`` onto ``gt`` (Umeyama).

    Returns the transform and the transformed prediction. Collinear or
    coincident predictions raise unless ``strict`` is False, in which case
    collinear inputs still get a (non-unique) optimal transform and
    coincident ones collapse onto the groundtruth centroid.
    """
    p, g = _check_pair(pred, gt)
    mu_p, mu_g = p.mean(axis=0), g.mean(axis=0)
    pc, gc = p - mu_p, g - mu_g
    var_p = (pc ** 2).sum() / p.shape[0]
    _, sp, _ = svd3(pc.T @ pc)
    if var_p <= 1e-18 or sp[1] <= 1e-12 * sp[0]:
        if strict:
            raise DegenerateConfiguration("prediction joints are collinear or coincident")
        if var_p <= 1e-18:
            tf = SimilarityTransform(0.0, np.eye(3), mu_g)
            return tf, np.broadcast_to(mu_g, g.shape).copy()
    cov = gc.T @ pc / p.shape[0]
    u, s, v = svd3(cov)
    fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(v) < 0:
        fix[2] = -1.0
    rot = (u * fix) @ v.T
    scale = float((s * fix).sum() / var_p)
    trans = mu_g - scale * rot @ mu_p
    tf = SimilarityTransform(scale, rot, trans)
    return tf, tf.apply(p)


def reconstruction_error(pred, gt, strict=True):
    """Mean joint distance (mm) after optimal similarity alignment; batches averaged."""
    p, g = _check_pair(pred, gt)
    if p.ndim == 2:
        _, aligned = procrustes_align(p, g, strict)
        return float(np.linalg.norm(aligned - g, axis=-1).mean())
    return float(np.mean([reconstruction_error(a, b, strict) for a, b in zip(p, g)]))


def pcp3d(pred, gt, skeleton, threshold_fraction=0.5, root=None):
    """Fraction of correctly placed parts per part group.

    A part is correct when both endpoints land within ``threshold_fraction``
    of the groundtruth part length, after aligning the chosen root joint
    (the skeleton's chest joint by default).
    """
    if not skeleton.parts:
        raise ValueError("skeleton defines no parts")
    p, g = _check_pair(pred, gt)
    if p.ndim == 2:
        p, g = p[None], g[None]
    r = skeleton.chest_index if root is None else root
    p = p - p[:, r:r + 1] + g[:, r:r + 1]
    hits = {}
    for a, b, group in skeleton.parts:
        length = np.linalg.norm(g[:, a] - g[:, b], axis=-1)
        if np.any(length == 0):
            raise ZeroLengthPart(f"part ({a}, {b}) has zero length")
        ok = (np.linalg.norm(p[:, a] - g[:, a], axis=-1) <= threshold_fraction * length) & (
            np.linalg.norm(p[:, b] - g[:, b], axis=-1) <= threshold_fraction * length
        )
        hits.setdefault(group, []).append(ok)
    return {group: float(np.mean(np.concatenate(v))) for group, v in hits.items()}


def pcp_parts(pred, gt, skeleton, threshold_fraction=0.5, root=None):
    """Per-part booleans for a single pose, in ``skeleton.parts`` order."""
    p, g = _check_pair(pred, gt)
    r = skeleton.chest_index if root is None else root
    p = p - p[r] + g[r]
    out = []
    for a, b, _ in skeleton.parts:
        length = np.linalg.norm(g[a] - g[b])
        if length == 0:
            raise ZeroLengthPart(f"part ({a}, {b}) has zero length")
        tol = threshold_fraction * length
        out.append(bool(np.linalg.norm(p[a] - g[a]) <= tol and np.linalg.norm(p[b] - g[b]) <= tol))
    return out
