"""Minimal reverse-mode autodiff over dense NCHW tensors, plus the networks built on it."""
from . import ops
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .nets import NetSpec, Network, StageSpec, build_coord_net, build_network, build_stacked_net
from .tensor import Tape, Tensor

__all__ = [
    "ops", "Tape", "Tensor", "NetSpec", "Network", "StageSpec",
    "build_coord_net", "build_stacked_net", "build_network",
    "save_checkpoint", "load_checkpoint", "load_into",
]
