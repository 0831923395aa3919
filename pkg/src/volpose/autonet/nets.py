"""Hourglass-lite building block and the four network families under study.

* coordinate regression: one hourglass, global pooling, fully connected 3N head
* naive stacking: several hourglasses, every stage at full depth resolution
* coarse-to-fine: hourglasses supervised with an increasing depth ladder
* decoupled: like coarse-to-fine with ``fuse_features=False``; later stages
  only see the previous stage's heatmaps
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from ..heatmap import validate_ladder
from . import ops
from .tensor import Tensor


@dataclass
class StageSpec:
    head_channels: int
    fuse: bool

    def __post_init__(self):
        if self.head_channels < 1:
            raise ConfigError("head_channels must be >= 1")


@dataclass
class NetSpec:
    """Everything needed to rebuild a network (stored beside checkpoints)."""

    kind: str  # "volumetric" | "coord"
    n_joints: int
    input_size: int = 64
    out_size: int = 16
    ladder: tuple = (16,)
    fuse_features: bool = True
    width: int = 32
    hg_depth: int = 2
    stem_width: int = 16
    head_init: str = "glorot"  # or "zero"
    seed: int = 0
    dtype: str = "float32"
    stages: list = field(default_factory=list)

    def to_json(self):
        doc = asdict(self)
        doc["ladder"] = list(self.ladder)
        doc.pop("stages")
        return doc

    @classmethod
    def from_json(cls, doc):
        doc = dict(doc)
        doc["ladder"] = tuple(doc.get("ladder", (16,)))
        doc.pop("stages", None)
        return cls(**doc)


class _Init:
    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def conv(self, co, ci, k, zero=False):
        if zero:
            w = np.zeros((co, ci, k, k))
        else:
            limit = math.sqrt(6.0 / (ci * k * k + co * k * k))
            w = self.rng.uniform(-limit, limit, size=(co, ci, k, k))
        return w.astype(self.dtype), np.zeros(co, dtype=self.dtype)

    def linear(self, out, inp, zero=False):
        if zero:
            w = np.zeros((out, inp))
        else:
            limit = math.sqrt(6.0 / (inp + out))
            w = self.rng.uniform(-limit, limit, size=(out, inp))
        return w.astype(self.dtype), np.zeros(out, dtype=self.dtype)


class Network:
    """Parameter store plus forward pass for one of the network families."""

    def __init__(self, spec):
        self.spec = spec
        self.params = OrderedDict()
        self._init = _Init(spec.seed, np.dtype(spec.dtype))
        self._check_shapes()
        self._build()

    # -- construction -------------------------------------------------------

    def _check_shapes(self):
        s = self.spec
        ratio = s.input_size / s.out_size
        if s.out_size < 1 or ratio < 1 or ratio != int(ratio) or (int(ratio) & (int(ratio) - 1)):
            raise ConfigError(
                f"input size {s.input_size} cannot be pooled down to output size {s.out_size}"
            )
        if s.out_size % (2 ** s.hg_depth):
            raise ConfigError(f"output size {s.out_size} not divisible by 2^{s.hg_depth}")
        self.n_down = int(round(math.log2(ratio)))

    def _conv(self, name, co, ci, k, zero=False):
        w, b = self._init.conv(co, ci, k, zero)
        self.params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(b, requires_grad=True, name=name + ".b")

    def _linear(self, name, out, inp, zero=False):
        w, b = self._init.linear(out, inp, zero)
        self.params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(b, requires_grad=True, name=name + ".b")

    def _build_hourglass(self, prefix, level):
        width = self.spec.width
        self._conv(f"{prefix}.up1", width, width, 3)
        self._conv(f"{prefix}.low1", width, width, 3)
        if level > 1:
            self._build_hourglass(f"{prefix}.inner", level - 1)
        else:
            self._conv(f"{prefix}.low2", width, width, 3)
        self._conv(f"{prefix}.low3", width, width, 3)

    def _build(self):
        s = self.spec
        if s.kind not in ("volumetric", "coord"):
            raise ConfigError(f"unknown network kind {s.kind!r}")
        zero_head = s.head_init == "zero"
        self._conv("stem.0", s.stem_width, 1, 3)
        prev = s.stem_width
        for i in range(self.n_down):
            self._conv(f"stem.{i + 1}", s.width, prev, 3)
            prev = s.width
        if prev != s.width:
            self._conv("stem.proj", s.width, prev, 1)
        if s.kind == "coord":
            s.stages = [StageSpec(3 * s.n_joints, fuse=False)]
            self._build_hourglass("hg0", s.hg_depth)
            self._conv("ll0", s.width, s.width, 3)
            self._linear("fc", 3 * s.n_joints, s.width, zero_head)
            return
        ladder = validate_ladder(s.ladder)
        s.stages = [StageSpec(d * s.n_joints, s.fuse_features) for d in ladder]
        for i, stage in enumerate(s.stages):
            self._build_hourglass(f"hg{i}", s.hg_depth)
            self._conv(f"ll{i}", s.width, s.width, 3)
            self._conv(f"head{i}", stage.head_channels, s.width, 1, zero_head)
            if i < len(s.stages) - 1:
                self._conv(f"remap{i}", s.width, stage.head_channels, 1)
                if stage.fuse:
                    self._conv(f"fuse{i}", s.width, s.width, 1)

    # -- forward ------------------------------------------------------------

    def _p(self, name):
        return self.params[name + ".w"], self.params[name + ".b"]

    def _block(self, name, x):
        return ops.relu(ops.conv2d(x, *self._p(name)))

    def _hourglass(self, prefix, x, level):
        up1 = self._block(f"{prefix}.up1", x)
        low1 = self._block(f"{prefix}.low1", ops.max_pool_2x(x))
        if level > 1:
            low2 = self._hourglass(f"{prefix}.inner", low1, level - 1)
        else:
            low2 = self._block(f"{prefix}.low2", low1)
        low3 = self._block(f"{prefix}.low3", low2)
        return ops.add(up1, ops.upsample_2x(low3))

    def _stem(self, x):
        h = self._block("stem.0", x)
        for i in range(self.n_down):
            h = self._block(f"stem.{i + 1}", ops.max_pool_2x(h))
        if "stem.proj.w" in self.params:
            h = ops.conv2d(h, *self._p("stem.proj"))
        return h

    def forward(self, batch, ablate_features=False):
        """Stage outputs for an image batch of shape (B, 1, S, S).

        ``ablate_features`` zeroes every image-feature path entering stages
        after the first (the previous input and the stage features), leaving
        only the remapped heatmaps.
        """
        s = self.spec
        x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=s.dtype)
        if x.value.ndim != 4 or x.shape[1:] != (1, s.input_size, s.input_size):
            raise ShapeMismatch(f"expected input (B, 1, {s.input_size}, {s.input_size}), got {x.shape}")
        feats = self._stem(x)
        if s.kind == "coord":
            hg = self._hourglass("hg0", feats, s.hg_depth)
            ll = self._block("ll0", hg)
            return [ops.fully_connected(ops.global_avg_pool(ll), *self._p("fc"))]
        outs = []
        for i, stage in enumerate(s.stages):
            hg = self._hourglass(f"hg{i}", feats, s.hg_depth)
            ll = self._block(f"ll{i}", hg)
            out = ops.conv2d(ll, *self._p(f"head{i}"))
            outs.append(out)
            if i == len(s.stages) - 1:
                break
            remap = ops.conv2d(out, *self._p(f"remap{i}"))
            if stage.fuse and not ablate_features:
                feats = ops.add(feats, ops.conv2d(ll, *self._p(f"fuse{i}")), remap)
            else:
                feats = remap
        return outs

    __call__ = forward

    # -- bookkeeping --------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self):
        return int(sum(p.value.size for p in self.params.values()))


def build_coord_net(skeleton, input_shape=(1, 64, 64), out_size=16, **kw):
    """Coordinate-regression network emitting (B, 3N) root-relative coordinates."""
    return Network(NetSpec(kind="coord", n_joints=skeleton.n_joints,
                           input_size=_square(input_shape), out_size=out_size, **kw))


def build_stacked_net(skeleton, grid, ladder, fuse_features=True, input_shape=(1, 64, 64), **kw):
    """One hourglass per ladder stage; the final stage must match ``grid.d``."""
    ladder = validate_ladder(ladder)
    if grid.w != grid.h:
        raise ConfigError(f"grid must be square in x-y, got {grid.w}x{grid.h}")
    if ladder[-1] != grid.d:
        raise ConfigError(f"last ladder entry {ladder[-1]} must equal grid depth {grid.d}")
    return Network(NetSpec(kind="volumetric", n_joints=skeleton.n_joints,
                           input_size=_square(input_shape), out_size=grid.w, ladder=ladder,
                           fuse_features=fuse_features, **kw))


def _square(input_shape):
    if len(input_shape) != 3 or input_shape[0] != 1 or input_shape[1] != input_shape[2]:
        raise ConfigError(f"input must be (1, S, S), got {tuple(input_shape)}")
    return int(input_shape[1])


def build_network(spec):
    return Network(spec)
