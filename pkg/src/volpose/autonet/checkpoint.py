"""Binary parameter checkpoints.

Layout (little-endian): ``b"VPKT"``, version u32, param_count u32, then per
parameter: name length u32, utf-8 name, ndim u32, dims u32 * ndim, float32 data.
"""
import struct

import numpy as np

from ..errors import ShapeMismatch

MAGIC = b"VPKT"
VERSION = 1


def save_checkpoint(path, params):
    """Write an ordered ``name -> Tensor | ndarray`` mapping."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        arr = np.ascontiguousarray(getattr(p, "value", p), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict of float32 arrays."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return out


def load_into(network, path):
    arrays = load_checkpoint(path)
    if list(arrays) != list(network.params):
        raise ShapeMismatch("checkpoint parameter names do not match the network")
    for name, arr in arrays.items():
        p = network.params[name]
        if p.shape != arr.shape:
            raise ShapeMismatch(f"{name}: checkpoint {arr.shape} vs network {p.shape}")
        p.value = arr.astype(p.value.dtype)
    return network
