"""Synthetic dataset, augmentation, RMSProp and the experiment runner."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .autonet import Tape, build_coord_net, build_stacked_net, ops
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .heatmap import (
    DEFAULT_SIGMA,
    HeatmapVolume,
    decode_argmax,
    decode_soft,
    downsample_ladder,
    loss_coords,
    loss_volume,
    synth_target,
    validate_ladder,
)
from .render import render_evidence
from .skeleton import CameraPlacement, Pose2D, Pose3D, make_toy_skeleton, project_pose, sample_pose
from .voxelgrid import (
    VoxelGrid,
    clip_to_grid,
    estimate_root_depth,
    lift_to_3d,
    metric_to_voxel,
    voxel_to_metric,
)

logger = logging.getLogger(__name__)

TRAIN_SPLIT, TEST_SPLIT = 0, 1


@dataclass
class Camera:
    focal: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0

    @property
    def principal_point(self):
        return (self.cx, self.cy)


@dataclass
class GridConfig:
    w: int = 16
    h: int = 16
    d: int = 16
    z_half_range_mm: float = 1000.0
    z_min_mm: float = 500.0
    z_max_mm: float = 10000.0


@dataclass
class Augmentation:
    enabled: bool = True
    rotate_deg: float = 30.0
    scale: tuple = (0.75, 1.25)
    flip: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 2.5e-4
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    arch: str = "volumetric"  # or "coord"
    ladder: tuple = (16,)
    fuse_features: bool = True
    n_train: int = 2000
    n_test: int = 200
    image_size: int = 64
    width: int = 32
    hg_depth: int = 2
    sigma: float = DEFAULT_SIGMA
    decode: str = "soft"  # or "argmax"; the 16-deep grid leaves argmax a 64 mm floor
    root_depth: str = "groundtruth"  # or "estimated"
    eval_batch: int = 25
    augmentation: Augmentation = field(default_factory=Augmentation)
    grid: GridConfig = field(default_factory=GridConfig)
    camera: Camera = field(default_factory=Camera)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = Augmentation(**self.augmentation)
        if isinstance(self.grid, dict):
            self.grid = GridConfig(**self.grid)
        if isinstance(self.camera, dict):
            self.camera = Camera(**self.camera)
        self.augmentation.scale = tuple(float(v) for v in self.augmentation.scale)
        self.ladder = tuple(int(v) for v in self.ladder)
        self.validate()

    def validate(self):
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if self.batch_size <= 0 or self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError("batch and dataset sizes must be positive")
        lo, hi = self.augmentation.scale
        if not 0 < lo <= hi:
            raise ConfigError("augmentation scale range must be positive and ordered")
        if self.arch not in ("volumetric", "coord"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.decode not in ("argmax", "soft"):
            raise ConfigError(f"unknown decode {self.decode!r}")
        if self.root_depth not in ("groundtruth", "estimated"):
            raise ConfigError(f"unknown root_depth {self.root_depth!r}")
        if self.arch == "volumetric":
            try:
                validate_ladder(self.ladder)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if self.ladder[-1] != self.grid.d:
                raise ConfigError("last ladder entry must equal grid.d")

    def to_json(self):
        doc = asdict(self)
        doc["ladder"] = list(self.ladder)
        doc["augmentation"]["scale"] = list(self.augmentation.scale)
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (1, S, S) float32
    pose3d: Pose3D
    pose2d: Pose2D
    grid: VoxelGrid
    pose_vox: np.ndarray  # (N, 3), clipped into the grid
    noise_seed: int
    n_clipped: int = 0
    targets: list | None = None


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def build_sample(sample_id, skeleton, pose3d, config, noise_seed, bbox=None):
    cam = config.camera
    pose2d = project_pose(pose3d, cam.focal, cam.principal_point)
    if bbox is not None:
        pose2d = Pose2D(pose2d.coords, bbox)
    image = render_evidence(skeleton, pose3d, pose2d, config.image_size, noise_seed)
    return assemble_sample(sample_id, skeleton, pose3d, pose2d, image, config, noise_seed)


def assemble_sample(sample_id, skeleton, pose3d, pose2d, image, config, noise_seed):
    """Sample from already-rendered parts (used when loading stored datasets)."""
    g = config.grid
    grid = VoxelGrid(g.w, g.h, g.d, pose2d.bbox,
                     z_center=float(pose3d.coords[skeleton.root_index, 2]),
                     z_half_range=g.z_half_range_mm)
    vox, n_clipped = clip_to_grid(grid, metric_to_voxel(grid, pose2d.coords, pose3d.coords[:, 2]))
    image = np.asarray(image, dtype=np.float32).reshape(1, config.image_size, config.image_size)
    return Sample(sample_id, image, pose3d, pose2d, grid, vox, int(noise_seed), n_clipped)


def ladder_targets(sample, ladder, sigma=DEFAULT_SIGMA):
    """Per-stage targets for ``sample`` in the network layout (C, h, w)."""
    full = synth_target(sample.grid, sample.pose_vox, sigma) if sample.grid.d in ladder else None
    vols = downsample_ladder(full, ladder, sample.grid, sample.pose_vox, sigma)
    return [np.ascontiguousarray(v.to_chw(), dtype=np.float32) for v in vols]


def _seeds(seed, split, index):
    pose_seed, noise_seed = np.random.SeedSequence([seed, split, index]).generate_state(2)
    return int(pose_seed), int(noise_seed)


def make_dataset(skeleton, n_train, n_test, seed, config=None, ladder=None):
    """Deterministic train/test splits drawn from disjoint seed streams."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("dataset sizes must be positive")
    config = config or TrainConfig()
    out = []
    for split, count, prefix in ((TRAIN_SPLIT, n_train, "train"), (TEST_SPLIT, n_test, "test")):
        samples = []
        for i in range(count):
            pose_seed, noise_seed = _seeds(seed, split, i)
            pose = sample_pose(skeleton, pose_seed, CameraPlacement())
            s = build_sample(f"{prefix}-{i:05d}", skeleton, pose, config, noise_seed)
            if ladder is not None:
                s.targets = ladder_targets(s, ladder, config.sigma)
            samples.append(s)
        out.append(samples)
    clipped = sum(s.n_clipped for split in out for s in split)
    if clipped:
        logger.warning("%d joint(s) fell outside their grids and were clipped", clipped)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _axis_angle(axis, angle):
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def apply_augmentation(sample, skeleton, config, angle_deg=0.0, scale=1.0, flip=False):
    """Deterministic transform of a sample; targets are re-synthesized, never warped.

    The flip mirrors the pose through the camera's y-z plane and swaps
    left/right labels. The rotation turns the pose about the viewing ray
    through the bbox center, which rotates the image about that center.
    Scaling resizes the bbox only; the metric pose is untouched.
    """
    coords = sample.pose3d.coords
    if flip:
        coords = coords * np.array([-1.0, 1.0, 1.0])
        coords = coords[skeleton.left_right_map]
    if angle_deg != 0.0:
        cam = config.camera
        bbox = project_pose(Pose3D(coords), cam.focal, cam.principal_point).bbox
        uc, vc = bbox[0] + 0.5 * bbox[2], bbox[1] + 0.5 * bbox[3]
        ray = np.array([(uc - cam.cx) / cam.focal, (vc - cam.cy) / cam.focal, 1.0])
        coords = coords @ _axis_angle(ray, math.radians(angle_deg)).T
    pose = Pose3D(coords)
    bbox = None
    if scale != 1.0:
        cam = config.camera
        x0, y0, bw, bh = project_pose(pose, cam.focal, cam.principal_point).bbox
        cx, cy = x0 + 0.5 * bw, y0 + 0.5 * bh
        bbox = (cx - 0.5 * bw * scale, cy - 0.5 * bh * scale, bw * scale, bh * scale)
    out = build_sample(sample.id, skeleton, pose, config, sample.noise_seed, bbox)
    if sample.targets is not None:
        ladder = tuple(t.shape[0] // skeleton.n_joints for t in sample.targets)
        out.targets = ladder_targets(out, ladder, config.sigma)
    return out


def draw_augmentation(rng, aug):
    angle = float(rng.uniform(-aug.rotate_deg, aug.rotate_deg))
    scale = float(rng.uniform(*aug.scale))
    flip = bool(aug.flip and rng.random() < 0.5)
    return angle, scale, flip


def augment(sample, rng, skeleton=None, config=None):
    """Random rotation (+-30 deg), bbox scale (0.75-1.25) and left-right flip."""
    skeleton = skeleton or make_toy_skeleton()
    config = config or TrainConfig()
    angle, scale, flip = draw_augmentation(rng, config.augmentation)
    return apply_augmentation(sample, skeleton, config, angle, scale, flip)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def rmsprop_step(params, grads, state, lr, decay=0.99, eps=1e-8):
    """In-place RMSProp update.

    ``cache = decay*cache + (1-decay)*grad**2``;
    ``param -= lr*grad / (sqrt(cache) + eps)``. ``state`` is the list of
    caches (``None`` to start fresh); returns ``(params, state)``.
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state)):
        raise ShapeMismatch("params, grads and state must align")
    for p, g, c in zip(params, grads, state):
        if p.shape != g.shape or p.shape != c.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        c *= decay
        c += (1.0 - decay) * g * g
        p -= lr * g / (np.sqrt(c) + eps)
    return params, state


class RMSProp:
    def __init__(self, tensors, lr, decay=0.99, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.state = [np.zeros_like(t.value) for t in self.tensors]

    def step(self):
        params, grads, state = [], [], []
        for t, c in zip(self.tensors, self.state):
            if t.grad is not None:
                params.append(t.value)
                grads.append(t.grad)
                state.append(c)
        rmsprop_step(params, grads, state, self.lr, self.decay, self.eps)


# ---------------------------------------------------------------------------
# networks, training, evaluation
# ---------------------------------------------------------------------------

def build_model(config, skeleton):
    input_shape = (1, config.image_size, config.image_size)
    kw = dict(width=config.width, hg_depth=config.hg_depth, seed=config.seed)
    if config.arch == "coord":
        return build_coord_net(skeleton, input_shape, out_size=config.grid.w, **kw)
    grid = VoxelGrid(config.grid.w, config.grid.h, config.grid.d)
    return build_stacked_net(skeleton, grid, config.ladder, config.fuse_features, input_shape, **kw)


def _coord_target(sample, skeleton):
    c = sample.pose3d.coords
    return ((c - c[skeleton.root_index]) / 1000.0).reshape(-1)


def batch_loss(network, samples, config, skeleton):
    x = np.stack([s.image for s in samples]).astype(np.float32)
    outs = network(x)
    if config.arch == "coord":
        tgt = np.stack([_coord_target(s, skeleton) for s in samples])
        return loss_coords(outs[0], tgt)
    losses = []
    targets = [s.targets if s.targets is not None and len(s.targets) == len(outs)
               else ladder_targets(s, config.ladder, config.sigma) for s in samples]
    for stage, out in enumerate(outs):
        tgt = np.stack([t[stage] for t in targets])
        losses.append(loss_volume(out, tgt))
    return losses[0] if len(losses) == 1 else ops.add(*losses)


def train_network(network, train_set, config, skeleton, progress=None):
    """Run ``config.steps`` RMSProp updates; returns the per-step loss curve."""
    rng = np.random.default_rng([config.seed, 17])
    opt = RMSProp(network.parameters(), config.learning_rate, config.rms_decay, config.rms_eps)
    order = np.empty(0, dtype=np.int64)
    curve = []
    clipped = 0
    for step in range(config.steps):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(train_set))])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        batch = []
        for i in idx:
            s = train_set[int(i)]
            if config.augmentation.enabled:
                s = apply_augmentation(s, skeleton, config, *draw_augmentation(rng, config.augmentation))
            clipped += s.n_clipped
            batch.append(s)
        with Tape() as tape:
            loss = batch_loss(network, batch, config, skeleton)
        value = float(loss.value)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at step {step}")
        tape.backward(loss)
        opt.step()
        network.zero_grad()
        curve.append(value)
        if progress is not None:
            progress(step, value)
    if clipped:
        logger.warning("augmentation pushed %d joint(s) outside the grid; clipped", clipped)
    return curve


def predict_poses(network, samples, config, skeleton):
    """Metric camera-frame predictions (M, N, 3) plus soft-decoded variants."""
    n = skeleton.n_joints
    cam = config.camera
    hard, soft = [], []
    for start in range(0, len(samples), config.eval_batch):
        chunk = samples[start:start + config.eval_batch]
        x = np.stack([s.image for s in chunk]).astype(np.float32)
        out = network(x)[-1].value
        for s, o in zip(chunk, out):
            if config.arch == "coord":
                root = s.pose3d.coords[skeleton.root_index]
                p = o.astype(np.float64).reshape(n, 3) * 1000.0 + root
                hard.append(p)
                soft.append(p)
                continue
            vol = HeatmapVolume.from_chw(o.astype(np.float64), config.grid.d, n)
            hard.append(_lift(decode_argmax(vol), s, config, skeleton))
            soft.append(_lift(decode_soft(vol), s, config, skeleton))
    return np.array(hard), np.array(soft)


def _lift(vc, sample, config, skeleton):
    grid = sample.grid
    cam = config.camera
    if config.root_depth == "estimated":
        uv, z = voxel_to_metric(grid, vc)
        rel = z - grid.z_center
        z_root = estimate_root_depth(uv, rel, skeleton, cam.focal, cam.principal_point,
                                     config.grid.z_min_mm, config.grid.z_max_mm)
        grid = replace(grid, z_center=z_root)
    return lift_to_3d(grid, vc, cam.focal, cam.principal_point)


def evaluate(network, test_set, config, skeleton):
    gt = np.array([s.pose3d.coords for s in test_set])
    hard, soft = predict_poses(network, test_set, config, skeleton)
    pred = soft if config.decode == "soft" else hard
    return {
        "test_mpjpe_mm": metrics.mpjpe(pred, gt, skeleton.root_index),
        "test_recon_err_mm": metrics.reconstruction_error(pred, gt, strict=False),
        "test_pcp": metrics.pcp3d(pred, gt, skeleton),
        "decode_stats": {
            "test_mpjpe_argmax_mm": metrics.mpjpe(hard, gt, skeleton.root_index),
            "test_mpjpe_soft_mm": metrics.mpjpe(soft, gt, skeleton.root_index),
            "test_clipped_joints": int(sum(s.n_clipped for s in test_set)),
        },
    }


def run_experiment(config, skeleton=None, dataset=None, progress=None):
    """Train one network per ``config`` and evaluate it on the synthetic test split."""
    t0 = time.perf_counter()
    skeleton = skeleton or make_toy_skeleton()
    if dataset is None:
        dataset = make_dataset(skeleton, config.n_train, config.n_test, config.seed, config)
    train_set, test_set = dataset
    network = build_model(config, skeleton)
    curve = train_network(network, train_set, config, skeleton, progress)
    report = {"config": config.to_json(), "loss_curve": curve}
    per_epoch = max(1, math.ceil(config.n_train / config.batch_size))
    report["epoch_losses"] = [float(np.mean(curve[i:i + per_epoch]))
                              for i in range(0, len(curve), per_epoch)]
    report.update(evaluate(network, test_set, config, skeleton))
    report["n_parameters"] = network.n_parameters()
    report["runtime_s"] = time.perf_counter() - t0
    return report, network
