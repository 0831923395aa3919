"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports cleanly and ``VPK_DISABLE_NUMBA``
is unset (or ``0``). ``set_backend`` switches at runtime; the benchmark and
the backend-parity tests rely on it.

The two paths agree to floating-point reassociation, not bitwise.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_BACKEND = "numpy"


def _env_wants_numba():
    flag = os.environ.get("VPK_DISABLE_NUMBA", "").strip().lower()
    return numba is not None and flag in ("", "0", "false", "no")


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` for every kernel in this module."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not importable")
    _BACKEND = name


def get_backend():
    return _BACKEND


# ---------------------------------------------------------------------------
# 3x3 im2col / col2im for stride-1, same-padded convolution (NCHW)
# ---------------------------------------------------------------------------

def _im2col3_numpy(x):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # b, c, h, w, 3, 3
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * 9)


def _col2im3_numpy(cols, shape):
    b, c, h, w = shape
    blocks = cols.reshape(b, h, w, c, 3, 3)
    out = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            out[:, :, ky:ky + h, kx:kx + w] += blocks[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def _im2col3_loops(x):
    b, c, h, w = x.shape
    cols = np.zeros((b * h * w, c * 9), dtype=x.dtype)
    for bi in range(b):
        for y in range(h):
            for xx in range(w):
                row = (bi * h + y) * w + xx
                for ci in range(c):
                    base = ci * 9
                    for ky in range(3):
                        sy = y + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= w:
                                continue
                            cols[row, base + ky * 3 + kx] = x[bi, ci, sy, sx]
    return cols


def _col2im3_loops(cols, b, c, h, w):
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    for bi in range(b):
        for y in range(h):
            for xx in range(w):
                row = (bi * h + y) * w + xx
                for ci in range(c):
                    base = ci * 9
                    for ky in range(3):
                        sy = y + ky - 1
                        if sy < 0 or sy >= h:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= w:
                                continue
                            out[bi, ci, sy, sx] += cols[row, base + ky * 3 + kx]
    return out


# ---------------------------------------------------------------------------
# joint-evidence rendering: gaussian blobs at joints plus shaded limb strokes
# ---------------------------------------------------------------------------

def _render_numpy(size, cu, cv, amp, blob_sigma, seg_a, seg_b, line_sigma, line_gain):
    centers = np.arange(size, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    img = np.zeros((size, size), dtype=np.float64)
    for n in range(cu.shape[0]):
        d2 = (xx - cu[n]) ** 2 + (yy - cv[n]) ** 2
        img += amp[n] * np.exp(-d2 / (2.0 * blob_sigma[n] ** 2))
    for m in range(seg_a.shape[0]):
        a, b = seg_a[m], seg_b[m]
        dx, dy = cu[b] - cu[a], cv[b] - cv[a]
        l2 = dx * dx + dy * dy
        if l2 > 0.0:
            t = ((xx - cu[a]) * dx + (yy - cv[a]) * dy) / l2
            t = np.clip(t, 0.0, 1.0)
        else:
            t = np.zeros_like(xx)
        px, py = cu[a] + t * dx, cv[a] + t * dy
        d2 = (xx - px) ** 2 + (yy - py) ** 2
        shade = amp[a] + t * (amp[b] - amp[a])
        img += line_gain * shade * np.exp(-d2 / (2.0 * line_sigma ** 2))
    return img


def _render_loops(size, cu, cv, amp, blob_sigma, seg_a, seg_b, line_sigma, line_gain):
    # each primitive only touches pixels within 5 sigma of it; beyond that the
    # contribution is below 4e-6 of its peak and is dropped
    img = np.zeros((size, size), dtype=np.float64)
    for n in range(cu.shape[0]):
        r = 5.0 * blob_sigma[n]
        inv = 1.0 / (2.0 * blob_sigma[n] ** 2)
        x0 = max(int(np.floor(cu[n] - r)), 0)
        x1 = min(int(np.ceil(cu[n] + r)), size)
        y0 = max(int(np.floor(cv[n] - r)), 0)
        y1 = min(int(np.ceil(cv[n] + r)), size)
        for y in range(y0, y1):
            dy2 = (y + 0.5 - cv[n]) ** 2
            for x in range(x0, x1):
                img[y, x] += amp[n] * np.exp(-((x + 0.5 - cu[n]) ** 2 + dy2) * inv)
    r = 5.0 * line_sigma
    inv = 1.0 / (2.0 * line_sigma ** 2)
    for m in range(seg_a.shape[0]):
        a = seg_a[m]
        b = seg_b[m]
        dx = cu[b] - cu[a]
        dy = cv[b] - cv[a]
        l2 = dx * dx + dy * dy
        x0 = max(int(np.floor(min(cu[a], cu[b]) - r)), 0)
        x1 = min(int(np.ceil(max(cu[a], cu[b]) + r)), size)
        y0 = max(int(np.floor(min(cv[a], cv[b]) - r)), 0)
        y1 = min(int(np.ceil(max(cv[a], cv[b]) + r)), size)
        for y in range(y0, y1):
            py0 = y + 0.5
            for x in range(x0, x1):
                px0 = x + 0.5
                t = 0.0
                if l2 > 0.0:
                    t = ((px0 - cu[a]) * dx + (py0 - cv[a]) * dy) / l2
                    t = min(max(t, 0.0), 1.0)
                d2 = (px0 - cu[a] - t * dx) ** 2 + (py0 - cv[a] - t * dy) ** 2
                shade = amp[a] + t * (amp[b] - amp[a])
                img[y, x] += line_gain * shade * np.exp(-d2 * inv)
    return img


# ---------------------------------------------------------------------------
# 2x2 max pooling with first-maximum routing
# ---------------------------------------------------------------------------

def _maxpool2_numpy(x):
    b, c, h, w = x.shape
    quads = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    quads = quads.reshape(b, c, h // 2, w // 2, 4)
    idx = quads.argmax(axis=-1)
    out = np.take_along_axis(quads, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def _maxpool2_back_numpy(g, idx):
    b, c, h2, w2 = g.shape
    dx = (np.arange(4) == idx[..., None]) * g[..., None]
    dx = dx.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(b, c, 2 * h2, 2 * w2).astype(g.dtype)


def _maxpool2_loops(x):
    b, c, h, w = x.shape
    out = np.empty((b, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((b, c, h // 2, w // 2), dtype=np.int8)
    for bi in range(b):
        for ci in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    best = x[bi, ci, 2 * y, 2 * xx]
                    arg = 0
                    for q in range(1, 4):
                        v = x[bi, ci, 2 * y + q // 2, 2 * xx + q % 2]
                        if v > best:
                            best = v
                            arg = q
                    out[bi, ci, y, xx] = best
                    idx[bi, ci, y, xx] = arg
    return out, idx


def _maxpool2_back_loops(g, idx):
    b, c, h2, w2 = g.shape
    dx = np.zeros((b, c, 2 * h2, 2 * w2), dtype=g.dtype)
    for bi in range(b):
        for ci in range(c):
            for y in range(h2):
                for xx in range(w2):
                    q = idx[bi, ci, y, xx]
                    dx[bi, ci, 2 * y + q // 2, 2 * xx + q % 2] = g[bi, ci, y, xx]
    return dx


if numba is not None:
    _jit = numba.njit(cache=True, fastmath=False)
    _im2col3_numba = _jit(_im2col3_loops)
    _col2im3_numba = _jit(_col2im3_loops)
    _render_numba = _jit(_render_loops)
    _maxpool2_numba = _jit(_maxpool2_loops)
    _maxpool2_back_numba = _jit(_maxpool2_back_loops)
    _BACKEND = "numba" if _env_wants_numba() else "numpy"


def im2col3(x):
    """(B, C, H, W) -> (B*H*W, C*9) patch matrix with zero padding."""
    if _BACKEND == "numba":
        return _im2col3_numba(np.ascontiguousarray(x))
    return _im2col3_numpy(x)


def col2im3(cols, shape):
    """Adjoint of :func:`im2col3`: scatter-add patch gradients back to (B, C, H, W)."""
    if _BACKEND == "numba":
        b, c, h, w = shape
        return _col2im3_numba(np.ascontiguousarray(cols), b, c, h, w)
    return _col2im3_numpy(cols, shape)


def maxpool2(x):
    """2x2/stride-2 max pool; returns values and the winning slot (0..3) per window."""
    if _BACKEND == "numba":
        return _maxpool2_numba(np.ascontiguousarray(x))
    return _maxpool2_numpy(x)


def maxpool2_backward(g, idx):
    if _BACKEND == "numba":
        return _maxpool2_back_numba(np.ascontiguousarray(g), idx)
    return _maxpool2_back_numpy(g, idx)


def render(size, cu, cv, amp, blob_sigma, seg_a, seg_b, line_sigma=0.8, line_gain=0.5):
    args = (
        int(size),
        np.ascontiguousarray(cu, dtype=np.float64),
        np.ascontiguousarray(cv, dtype=np.float64),
        np.ascontiguousarray(amp, dtype=np.float64),
        np.ascontiguousarray(blob_sigma, dtype=np.float64),
        np.ascontiguousarray(seg_a, dtype=np.int64),
        np.ascontiguousarray(seg_b, dtype=np.int64),
        float(line_sigma),
        float(line_gain),
    )
    if _BACKEND == "numba":
        return _render_numba(*args)
    return _render_numpy(*args)
