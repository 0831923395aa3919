"""Differentiable primitives over NCHW tensors.

Each primitive computes its forward value with numpy (or the kernels in
``volpose._kernels``) and registers a backward rule returning one gradient
per input.
"""
from __future__ import annotations

import numpy as np

from .. import _kernels
from ..errors import ShapeMismatch
from .tensor import Tensor, make_output


def _require(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


def conv2d(x, weight, bias=None):
    """Stride-1, same-padded convolution with a 1x1 or 3x3 kernel."""
    b, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    _require(x.value.ndim == 4, f"conv2d expects NCHW input, got {x.shape}")
    _require(ci == c, f"conv2d: input has {c} channels, kernel expects {ci}")
    _require(kh == kw and kh in (1, 3), f"conv2d: unsupported kernel {kh}x{kw}")
    if bias is not None:
        _require(bias.shape == (co,), f"conv2d: bias shape {bias.shape} != ({co},)")
    if kh == 3:
        cols = _kernels.im2col3(x.value)
    else:
        cols = x.value.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    wmat = weight.value.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.value
    value = out.reshape(b, h, w, co).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * h * w, co)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = g2 @ wmat
        if kh == 3:
            dx = _kernels.col2im3(dcols, (b, c, h, w))
        else:
            dx = dcols.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_output(value, parents, lambda g: backward(g)[:2])
    return make_output(value, parents, backward)


def relu(x):
    mask = x.value > 0
    zero = x.dtype.type(0)
    return make_output(np.where(mask, x.value, zero), (x,), lambda g: (np.where(mask, g, zero),))


def max_pool_2x(x):
    b, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"max_pool_2x needs even spatial size, got {h}x{w}")
    value, idx = _kernels.maxpool2(x.value)
    return make_output(value, (x,), lambda g: (_kernels.maxpool2_backward(g, idx),))


def upsample_2x(x):
    b, c, h, w = x.shape
    value = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_output(value, (x,), backward)


def add(*xs):
    shape = xs[0].shape
    for t in xs[1:]:
        _require(t.shape == shape, f"add: {t.shape} vs {shape}")
    value = xs[0].value.copy()
    for t in xs[1:]:
        value += t.value
    return make_output(value, tuple(xs), lambda g: (g,) * len(xs))


def fully_connected(x, weight, bias=None):
    _require(x.value.ndim == 2, f"fully_connected expects (batch, features), got {x.shape}")
    _require(weight.shape[1] == x.shape[1], f"fully_connected: {x.shape} vs weight {weight.shape}")
    value = x.value @ weight.value.T
    if bias is not None:
        value = value + bias.value

    def backward(g):
        return g @ weight.value, g.T @ x.value, g.sum(axis=0)

    if bias is None:
        return make_output(value, (x, weight), lambda g: backward(g)[:2])
    return make_output(value, (x, weight, bias), backward)


def reshape(x, shape):
    value = x.value.reshape(shape)
    return make_output(value, (x,), lambda g: (g.reshape(x.shape),))


def global_avg_pool(x):
    b, c, h, w = x.shape
    value = x.value.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_output(value, (x,), backward)


def scale(x, factor):
    return make_output(x.value * factor, (x,), lambda g: (g * factor,))


def squared_error(pred, target, scale=1.0):
    """``scale * sum((pred - target)**2)`` against a constant array."""
    _require(pred.shape == np.shape(target), f"squared_error: {pred.shape} vs {np.shape(target)}")
    diff = pred.value - target
    value = np.asarray(scale * np.sum(diff.astype(np.float64) ** 2), dtype=pred.dtype)
    return make_output(value, (pred,), lambda g: ((2.0 * scale * g) * diff,))


def constant(value, dtype=None):
    return Tensor(value, requires_grad=False, dtype=dtype)
