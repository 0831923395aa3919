"""Dense tensors and a recording tape for reverse-mode differentiation.

Operations only record while a :class:`Tape` is active in the current thread;
outside a tape, forward passes build no graph.
"""
from __future__ import annotations

import threading

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(value)
        if dtype is not None or arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE, copy=False)
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in creation order, which is already topological, so
    backward is a single reverse sweep visiting each node once.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, parents, backward):
        self.nodes.append((out, parents, backward))

    def backward(self, loss, seed=None):
        if seed is None:
            seed = np.ones_like(loss.value)
        loss.accumulate(seed)
        for out, parents, backward in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for parent, g in zip(parents, grads):
                if g is not None and parent.requires_grad:
                    parent.accumulate(g)
        return loss


def active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def make_output(value, parents, backward):
    """Wrap ``value`` and record ``backward`` on the active tape when needed."""
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out
