"""Skeletons, metric/image poses, and a procedural forward-kinematics sampler.

Coordinates are in the camera frame: x right, y down, z away from the camera,
all in millimetres. Image coordinates are pixels with the same x/y orientation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, ShapeMismatch

ROOT_PARENT = -1
BBOX_MARGIN = 0.15
MIN_BBOX_EXTENT_PX = 1.0


@dataclass
class Skeleton:
    """Kinematic tree with fixed limb lengths.

    ``limb_length[j]`` is the distance from joint ``j`` to its parent; the
    root entry is unused and stored as 0. ``parts`` holds ``(a, b, group)``
    triples used by PCP. ``rest_dir`` and ``angle_ranges_deg`` drive
    :func:`sample_pose`; generic defaults are filled in when omitted.
    """

    parent: np.ndarray
    limb_length: np.ndarray
    root_index: int = 0
    parts: list = field(default_factory=list)
    left_right_map: np.ndarray | None = None
    names: list | None = None
    rest_dir: np.ndarray | None = None
    angle_ranges_deg: np.ndarray | None = None
    chest_index: int | None = None

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.limb_length = np.asarray(self.limb_length, dtype=np.float64)
        n = self.parent.shape[0]
        if self.limb_length.shape != (n,):
            raise ShapeMismatch("limb_length must have one entry per joint")
        if self.left_right_map is None:
            self.left_right_map = np.arange(n)
        self.left_right_map = np.asarray(self.left_right_map, dtype=np.int64)
        if self.names is None:
            self.names = [f"j{i}" for i in range(n)]
        if self.rest_dir is None:
            self.rest_dir = np.tile([0.0, 1.0, 0.0], (n, 1))
        self.rest_dir = np.asarray(self.rest_dir, dtype=np.float64)
        self.rest_dir = self.rest_dir / np.linalg.norm(self.rest_dir, axis=1, keepdims=True)
        if self.angle_ranges_deg is None:
            self.angle_ranges_deg = np.tile([[-45.0, 45.0]] * 3, (n, 1, 1))
        self.angle_ranges_deg = np.asarray(self.angle_ranges_deg, dtype=np.float64)
        if self.chest_index is None:
            self.chest_index = self.root_index
        self.parts = [(int(a), int(b), str(g)) for a, b, g in self.parts]
        self.validate()

    @property
    def n_joints(self):
        return int(self.parent.shape[0])

    @property
    def bones(self):
        """(child, parent) pairs for every non-root joint, in index order."""
        return [(j, int(p)) for j, p in enumerate(self.parent) if p != ROOT_PARENT]

    @property
    def total_limb_length(self):
        return float(sum(self.limb_length[j] for j, _ in self.bones))

    def topological_order(self):
        order, seen = [], set()

        def visit(j):
            if j in seen:
                return
            p = int(self.parent[j])
            if p != ROOT_PARENT:
                visit(p)
            seen.add(j)
            order.append(j)

        for j in range(self.n_joints):
            visit(j)
        return order

    def validate(self):
        n = self.n_joints
        if not 0 <= self.root_index < n or self.parent[self.root_index] != ROOT_PARENT:
            raise ValueError("root joint must carry the sentinel parent")
        for j in range(n):
            seen = set()
            k = j
            while k != ROOT_PARENT:
                if k in seen or not (0 <= k < n):
                    raise ValueError(f"joint {j} does not reach the root")
                seen.add(k)
                k = int(self.parent[k])
            if self.root_index not in seen:
                raise ValueError(f"joint {j} reaches a second root")
            if j != self.root_index and not self.limb_length[j] > 0:
                raise ValueError(f"limb length of joint {j} must be positive")
        lr = self.left_right_map
        if sorted(lr.tolist()) != list(range(n)) or not np.array_equal(lr[lr], np.arange(n)):
            raise ValueError("left_right_map must be an involutive permutation")

    def to_json(self):
        return {
            "n_joints": self.n_joints,
            "parent": self.parent.tolist(),
            "limb_length_mm": self.limb_length.tolist(),
            "root_index": int(self.root_index),
            "parts": [[a, b, g] for a, b, g in self.parts],
            "left_right_pairs": [
                [int(i), int(j)] for i, j in enumerate(self.left_right_map) if i < j
            ],
            "names": list(self.names),
            "chest_index": int(self.chest_index),
            "rest_dir": self.rest_dir.tolist(),
            "angle_ranges_deg": self.angle_ranges_deg.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        n = int(doc["n_joints"])
        lr = np.arange(n)
        for i, j in doc.get("left_right_pairs", []):
            lr[i], lr[j] = j, i
        sk = cls(
            parent=doc["parent"],
            limb_length=doc["limb_length_mm"],
            root_index=doc["root_index"],
            parts=[tuple(p) for p in doc.get("parts", [])],
            left_right_map=lr,
            names=doc.get("names"),
            rest_dir=doc.get("rest_dir"),
            angle_ranges_deg=doc.get("angle_ranges_deg"),
            chest_index=doc.get("chest_index"),
        )
        if sk.n_joints != n:
            raise ShapeMismatch("n_joints disagrees with parent list")
        return sk

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class Pose3D:
    coords: np.ndarray  # (N, 3) mm, camera frame

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("pose coordinates must be finite")

    @property
    def n_joints(self):
        return self.coords.shape[0]

    def flipped_labels(self, skeleton):
        """Relabel joints through ``skeleton.left_right_map`` (no geometric change)."""
        return Pose3D(self.coords[skeleton.left_right_map])


@dataclass
class Pose2D:
    coords: np.ndarray  # (N, 2) px
    bbox: tuple  # (x_min, y_min, width, height) px

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.bbox = tuple(float(v) for v in self.bbox)
        if not (self.bbox[2] > 0 and self.bbox[3] > 0):
            raise ValueError("bbox width and height must be positive")


# Toy 12-joint body. Lengths in mm sum to 1700.
TOY_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_elbow", "l_wrist", "r_elbow", "r_wrist",
    "l_knee", "l_ankle", "r_knee", "r_ankle",
]
TOY_PARENT = [-1, 0, 1, 2, 2, 4, 2, 6, 0, 8, 0, 10]
TOY_LIMB_LENGTH = [0.0, 180.0, 180.0, 120.0, 150.0, 130.0, 150.0, 130.0, 180.0, 150.0, 180.0, 150.0]
TOY_LEFT_RIGHT = [0, 1, 2, 3, 6, 7, 4, 5, 10, 11, 8, 9]
TOY_PARTS = [
    (0, 1, "torso"), (1, 2, "torso"), (2, 3, "head"),
    (2, 4, "upper_arms"), (2, 6, "upper_arms"),
    (4, 5, "lower_arms"), (6, 7, "lower_arms"),
    (0, 8, "upper_legs"), (0, 10, "upper_legs"),
    (8, 9, "lower_legs"), (10, 11, "lower_legs"),
]
# rest directions in the body frame (y down, +x toward the subject's left)
TOY_REST_DIR = [
    [0, 1, 0], [0, -1, 0], [0, -1, 0], [0, -1, 0],
    [1, 0, 0], [1, 0, 0], [-1, 0, 0], [-1, 0, 0],
    [0.25, 1, 0], [0, 1, 0], [-0.25, 1, 0], [0, 1, 0],
]
# per-joint local euler ranges (deg) about x, y, z; right side mirrors y and z
_LEFT_RANGES = {
    0: [(-15, 15), (-90, 90), (-15, 15)],
    1: [(-30, 30), (-20, 20), (-20, 20)],
    2: [(-20, 20), (-20, 20), (-15, 15)],
    3: [(-30, 30), (-40, 40), (-20, 20)],
    4: [(-45, 45), (-90, 60), (-80, 60)],
    5: [(-20, 20), (-140, 0), (-10, 10)],
    8: [(-90, 20), (-30, 30), (-10, 40)],
    9: [(0, 120), (-10, 10), (-5, 5)],
}


def _toy_ranges():
    ranges = np.zeros((12, 3, 2))
    for j, r in _LEFT_RANGES.items():
        ranges[j] = r
    for left, right in ((4, 6), (5, 7), (8, 10), (9, 11)):
        ranges[right, 0] = ranges[left, 0]
        ranges[right, 1] = -ranges[left, 1, ::-1]
        ranges[right, 2] = -ranges[left, 2, ::-1]
    return ranges


def make_toy_skeleton():
    """The fixed 12-joint desk-scale body used throughout the benchmark."""
    return Skeleton(
        parent=TOY_PARENT,
        limb_length=TOY_LIMB_LENGTH,
        root_index=0,
        parts=TOY_PARTS,
        left_right_map=TOY_LEFT_RIGHT,
        names=list(TOY_NAMES),
        rest_dir=TOY_REST_DIR,
        angle_ranges_deg=_toy_ranges(),
        chest_index=2,
    )


def _euler_xyz(ax, ay, az):
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class CameraPlacement:
    """Where sampled roots land in front of the camera (mm)."""

    distance: float = 4000.0
    distance_jitter: float = 500.0
    lateral_jitter: float = 300.0


def sample_pose(skeleton, rng_seed, placement=CameraPlacement()):
    """Forward-kinematics pose with uniform per-joint angles.

    Limb lengths are reproduced exactly (each bone is a rotated unit vector
    scaled by its length).
    """
    rng = np.random.default_rng(rng_seed)
    n = skeleton.n_joints
    lo = np.deg2rad(skeleton.angle_ranges_deg[:, :, 0])
    hi = np.deg2rad(skeleton.angle_ranges_deg[:, :, 1])
    angles = rng.uniform(lo, hi)
    root_pos = np.array([
        rng.uniform(-placement.lateral_jitter, placement.lateral_jitter),
        rng.uniform(-placement.lateral_jitter, placement.lateral_jitter),
        placement.distance + rng.uniform(-placement.distance_jitter, placement.distance_jitter),
    ])
    rot = np.zeros((n, 3, 3))
    coords = np.zeros((n, 3))
    for j in skeleton.topological_order():
        local = _euler_xyz(*angles[j])
        p = int(skeleton.parent[j])
        if p == ROOT_PARENT:
            rot[j] = local
            coords[j] = root_pos
        else:
            rot[j] = rot[p] @ local
            coords[j] = coords[p] + skeleton.limb_length[j] * (rot[j] @ skeleton.rest_dir[j])
    return Pose3D(coords)


def tight_bbox(coords_px, margin=BBOX_MARGIN):
    lo = coords_px.min(axis=0)
    hi = coords_px.max(axis=0)
    ext = np.maximum(hi - lo, MIN_BBOX_EXTENT_PX)
    center = 0.5 * (lo + hi)
    ext = ext * (1.0 + 2.0 * margin)
    x0, y0 = center - 0.5 * ext
    return (float(x0), float(y0), float(ext[0]), float(ext[1]))


def project_pose(pose, focal, principal_point):
    """Pinhole projection plus a tight joint box grown by 15% per side."""
    xyz = pose.coords
    if np.any(xyz[:, 2] <= 0):
        raise NonPositiveDepth("every joint must lie in front of the camera (z > 0)")
    cx, cy = principal_point
    uv = np.empty((xyz.shape[0], 2))
    uv[:, 0] = focal * xyz[:, 0] / xyz[:, 2] + cx
    uv[:, 1] = focal * xyz[:, 1] / xyz[:, 2] + cy
    return Pose2D(uv, tight_bbox(uv))


def backproject(coords_px, depths, focal, principal_point):
    cx, cy = principal_point
    z = np.asarray(depths, dtype=np.float64)
    if np.any(z <= 0):
        raise NonPositiveDepth("depth must be positive")
    uv = np.asarray(coords_px, dtype=np.float64).reshape(-1, 2)
    return np.stack([(uv[:, 0] - cx) * z / focal, (uv[:, 1] - cy) * z / focal, z], axis=1)


def write_pose_records(path, records):
    """Write JSON-lines pose records (dicts with id/coords_mm/coords_px/bbox_px)."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def pose_record(sample_id, pose3d, pose2d, **extra):
    rec = {
        "id": sample_id,
        "coords_mm": pose3d.coords.tolist(),
        "coords_px": pose2d.coords.tolist() if pose2d is not None else [],
        "bbox_px": list(pose2d.bbox) if pose2d is not None else [],
    }
    rec.update(extra)
    return rec


def read_pose_records(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
