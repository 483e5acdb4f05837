"""Hot inner loops of the tensor engine.

Every kernel has a pure-numpy implementation; when numba is importable
the jitted variants replace them (3-50x faster on the conv/pool paths).
Both paths produce identical results for the gather/elementwise kernels;
col2im accumulates in a fixed per-element order so repeated runs are
bit-identical regardless of thread count.
"""

from __future__ import annotations

import warnings

import numpy as np

try:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # TBB version probing is noisy
        import numba
        from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _tune_malloc() -> None:
    # The conv buffers are tens of MB; glibc serves those via mmap and
    # returns them to the OS on free, so every training iteration pays
    # page-fault costs again. Raising the mmap/trim thresholds keeps the
    # pages in the heap for reuse. Best effort, Linux/glibc only.
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 512 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_malloc()


# ---------------------------------------------------------------------------
# im2col / col2im


def _im2col_np(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(-1, c * kh * kw)


def _col2im_np(gcols: np.ndarray, n: int, c: int, hp: int, wp: int,
               kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    g6 = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for a in range(kh):
        for b in range(kw):
            gx[:, :, a:a + ho * stride:stride,
               b:b + wo * stride:stride] += g6[:, :, :, :, a, b]
    return gx


def _maxpool_fwd_np(x: np.ndarray):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1).astype(np.uint8)  # first max wins ties
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def _maxpool_bwd_np(g: np.ndarray, arg: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = g.shape
    gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(gw, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return gx.reshape(n, c, 2 * h2, 2 * w2).copy()


def _prelu_fwd_np(x: np.ndarray, slope: np.ndarray, inner: int) -> np.ndarray:
    s = _expand_slope(slope, x.shape, inner)
    return np.where(x < 0, s * x, x)


def _prelu_bwd_np(g: np.ndarray, x: np.ndarray, slope: np.ndarray, inner: int):
    s = _expand_slope(slope, x.shape, inner)
    neg = x < 0
    gx = np.where(neg, s * g, g)
    contrib = np.where(neg, g * x, 0.0)
    flat = contrib.reshape(-1, slope.size, inner)
    return gx, flat.sum(axis=(0, 2))


def _expand_slope(slope: np.ndarray, shape, inner: int) -> np.ndarray:
    # channel axis is the one with stride `inner` elements
    full = np.broadcast_to(slope[:, None], (slope.size, inner)).reshape(-1)
    return np.broadcast_to(full, (int(np.prod(shape)) // full.size, full.size)).reshape(shape)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


im2col = _im2col_np
col2im = _col2im_np
maxpool_fwd = _maxpool_fwd_np
maxpool_bwd = _maxpool_bwd_np
prelu_fwd = _prelu_fwd_np
prelu_bwd = _prelu_bwd_np
sigmoid = _sigmoid_np


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _im2col_nb(xp, kh, kw, stride, cols):
        n, c, hp, wp = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        for row in prange(n * ho * wo):
            ni = row // (ho * wo)
            rem = row % (ho * wo)
            bi = (rem // wo) * stride
            bj = (rem % wo) * stride
            col = 0
            for ci in range(c):
                for a in range(kh):
                    for b in range(kw):
                        cols[row, col] = xp[ni, ci, bi + a, bj + b]
                        col += 1

    def im2col(xp, kh, kw, stride):
        n, c, hp, wp = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        cols = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
        _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, cols)
        return cols

    @njit(parallel=True, cache=True)
    def _col2im_nb(gcols, gx, kh, kw, stride, ho, wo):
        n, c = gx.shape[0], gx.shape[1]
        for nc in prange(n * c):
            ni = nc // c
            ci = nc % c
            base = ci * kh * kw
            for i in range(ho):
                for j in range(wo):
                    row = (ni * ho + i) * wo + j
                    for a in range(kh):
                        for b in range(kw):
                            gx[ni, ci, i * stride + a, j * stride + b] += \
                                gcols[row, base + a * kw + b]

    def col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo):
        gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
        _col2im_nb(np.ascontiguousarray(gcols), gx, kh, kw, stride, ho, wo)
        return gx

    @njit(parallel=True, cache=True)
    def _maxpool_fwd_nb(x, out, arg):
        n, c, h2, w2 = out.shape
        for nc in prange(n * c):
            ni = nc // c
            ci = nc % c
            for i in range(h2):
                for j in range(w2):
                    best = x[ni, ci, 2 * i, 2 * j]
                    code = np.uint8(0)
                    v = x[ni, ci, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        code = np.uint8(1)
                    v = x[ni, ci, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        code = np.uint8(2)
                    v = x[ni, ci, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        code = np.uint8(3)
                    out[ni, ci, i, j] = best
                    arg[ni, ci, i, j] = code

    def maxpool_fwd(x):
        n, c, h, w = x.shape
        out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        arg = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
        _maxpool_fwd_nb(np.ascontiguousarray(x), out, arg)
        return out, arg

    @njit(parallel=True, cache=True)
    def _maxpool_bwd_nb(g, arg, gx):
        n, c, h2, w2 = g.shape
        for nc in prange(n * c):
            ni = nc // c
            ci = nc % c
            for i in range(h2):
                for j in range(w2):
                    code = arg[ni, ci, i, j]
                    gx[ni, ci, 2 * i + code // 2, 2 * j + code % 2] = g[ni, ci, i, j]

    def maxpool_bwd(g, arg):
        n, c, h2, w2 = g.shape
        gx = np.zeros((n, c, 2 * h2, 2 * w2), dtype=g.dtype)
        _maxpool_bwd_nb(np.ascontiguousarray(g), arg, gx)
        return gx

    @njit(parallel=True, cache=True)
    def _prelu_fwd_nb(xf, slope, inner, out):
        # flat layout is [..., channel, inner]: contiguous channel blocks
        c = slope.size
        for bc in prange(xf.size // inner):
            s = slope[bc % c]
            base = bc * inner
            for k in range(inner):
                v = xf[base + k]
                out[base + k] = v if v >= 0 else s * v

    def prelu_fwd(x, slope, inner):
        out = np.empty(x.size, dtype=x.dtype)
        _prelu_fwd_nb(np.ascontiguousarray(x).reshape(-1), slope, inner, out)
        return out.reshape(x.shape)

    @njit(parallel=True, cache=True)
    def _prelu_bwd_nb(gf, xf, slope, inner, gx, partials):
        # one pass: input grad plus a per-block slope-grad partial sum
        c = slope.size
        for bc in prange(xf.size // inner):
            s = slope[bc % c]
            base = bc * inner
            acc = 0.0
            for k in range(inner):
                v = xf[base + k]
                gv = gf[base + k]
                if v >= 0:
                    gx[base + k] = gv
                else:
                    gx[base + k] = s * gv
                    acc += gv * v
            partials[bc] = acc

    def prelu_bwd(g, x, slope, inner):
        gx = np.empty(x.size, dtype=x.dtype)
        nblocks = x.size // inner
        partials = np.empty(nblocks, dtype=np.float64)
        _prelu_bwd_nb(np.ascontiguousarray(g).reshape(-1),
                      np.ascontiguousarray(x).reshape(-1),
                      slope, inner, gx, partials)
        gs = partials.reshape(-1, slope.size).sum(axis=0).astype(x.dtype)
        return gx.reshape(x.shape), gs

    @njit(parallel=True, cache=True)
    def _sigmoid_nb(xf, out):
        for idx in prange(xf.size):
            v = xf[idx]
            if v >= 0:
                out[idx] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out[idx] = e / (1.0 + e)

    def sigmoid(x):
        out = np.empty(x.size, dtype=x.dtype)
        _sigmoid_nb(np.ascontiguousarray(x).reshape(-1), out)
        return out.reshape(x.shape)
