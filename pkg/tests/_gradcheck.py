"""Central finite-difference checker shared by the autodiff tests.

A relu network is only piecewise smooth. When a +-step perturbation flips
some relu mask or max-pool winner, the central difference straddles a kink
and says nothing about the gradient. ``max_relative_error`` therefore records
the activation pattern at x, x+h and x-h and only scores coordinates where
all three agree; inside one pattern the loss is a polynomial in the
coordinate, so the difference quotient is a valid oracle there.
"""
import contextlib

import numpy as np

from volpose import _kernels
from volpose.autonet import Tape, ops


@contextlib.contextmanager
def _recording():
    log = []
    relu, pool = ops.relu, ops.max_pool_2x

    def rec_relu(x):
        log.append(x.value > 0)
        return relu(x)

    def rec_pool(x):
        log.append(_kernels.maxpool2(x.value)[1])
        return pool(x)

    ops.relu, ops.max_pool_2x = rec_relu, rec_pool
    try:
        yield log
    finally:
        ops.relu, ops.max_pool_2x = relu, pool


def _eval(loss_fn):
    with _recording() as log:
        value = float(loss_fn().value)
    return value, log


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class GradReport(float):
    """Max relative error, carrying how many coordinates were scored and skipped."""

    def __new__(cls, worst, scored, skipped):
        obj = super().__new__(cls, worst)
        obj.scored, obj.skipped = scored, skipped
        return obj


def max_relative_error(loss_fn, tensors, n_coords=64, step=1e-3, seed=0, floor=1e-6):
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over ``n_coords``
    randomly drawn coordinates at which the activation pattern is stable.

    ``loss_fn`` builds and returns a scalar tensor from ``tensors``.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = [np.zeros_like(t.value) if t.grad is None else t.grad.copy() for t in tensors]
    _, base = _eval(loss_fn)
    sizes = np.array([t.value.size for t in tensors])
    bounds = np.cumsum(sizes)
    order = np.random.default_rng(seed).permutation(int(bounds[-1]))
    worst, scored, skipped = 0.0, 0, 0
    for f in order:
        if scored == n_coords:
            break
        k = int(np.searchsorted(bounds, f, side="right"))
        idx = int(f - (bounds[k - 1] if k else 0))
        flat = tensors[k].value.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        up, pat_up = _eval(loss_fn)
        flat[idx] = orig - step
        down, pat_down = _eval(loss_fn)
        flat[idx] = orig
        if not (_same(base, pat_up) and _same(base, pat_down)):
            skipped += 1
            continue
        numeric = (up - down) / (2 * step)
        a = float(analytic[k].reshape(-1)[idx])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        scored += 1
    return GradReport(worst, scored, skipped)


def projected(out_fn, shape_seed=1):
    """Scalar loss 0.5*|out - R|^2 for a fixed random R, so non-scalar outputs can be checked."""
    cache = {}

    def loss():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = np.random.default_rng(shape_seed).normal(size=out.shape)
        return ops.squared_error(out, cache["r"], scale=0.5)

    return loss
