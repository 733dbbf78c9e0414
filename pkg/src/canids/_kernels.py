"""Fused single-pass kernels for the training hot path.

Each kernel has a pure-numpy twin used when numba is unavailable; both
compute the same quantities, and the numba versions run single-threaded so
results are reproducible run to run.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _pool_forward_jit(x, size, stride):
    n, c, h, w = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=np.float64)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for i in range(n):
        for j in range(c):
            for a in range(ho):
                ah = a * stride
                for b in range(wo):
                    bw = b * stride
                    best = x[i, j, ah, bw]
                    bi = 0
                    for p in range(size):
                        for q in range(size):
                            v = x[i, j, ah + p, bw + q]
                            if v > best:
                                best = v
                                bi = p * size + q
                    out[i, j, a, b] = best
                    arg[i, j, a, b] = bi
    return out, arg


@njit(cache=True)
def _pool_backward_jit(dout, arg, size, stride, h, w):
    n, c, ho, wo = dout.shape
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    for i in range(n):
        for j in range(c):
            for a in range(ho):
                for b in range(wo):
                    k = arg[i, j, a, b]
                    dx[i, j, a * stride + k // size, b * stride + k % size] += dout[i, j, a, b]
    return dx


@njit(cache=True)
def _relu_forward_jit(x):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0
    return out


@njit(cache=True)
def _relu_backward_jit(x, dout):
    dx = np.empty_like(dout)
    for i in range(x.size):
        dx[i] = dout[i] if x[i] > 0.0 else 0.0
    return dx


@njit(cache=True)
def _adam_update_jit(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


@njit(cache=True)
def _im2col_jit(xp, kh, kw, stride, ho, wo):
    n, c, _, _ = xp.shape
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=np.float64)
    for i in range(n):
        for a in range(ho):
            ah = a * stride
            base = (i * ho + a) * wo
            for b in range(wo):
                row = base + b
                bw = b * stride
                idx = 0
                for ch in range(c):
                    for p in range(kh):
                        for q in range(kw):
                            cols[row, idx] = xp[i, ch, ah + p, bw + q]
                            idx += 1
    return cols


@njit(cache=True)
def _nchw_to_mat_jit(x):
    n, f, h, w = x.shape
    out = np.empty((n * h * w, f), dtype=np.float64)
    for i in range(n):
        for j in range(f):
            for a in range(h):
                base = (i * h + a) * w
                for b in range(w):
                    out[base + b, j] = x[i, j, a, b]
    return out


@njit(cache=True)
def _mat_to_nchw_jit(mat, n, f, h, w):
    out = np.empty((n, f, h, w), dtype=np.float64)
    for i in range(n):
        for j in range(f):
            for a in range(h):
                base = (i * h + a) * w
                for b in range(w):
                    out[i, j, a, b] = mat[base + b, j]
    return out


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Contiguous (N*H'*W', C*kh*kw) patch matrix from padded NCHW input."""
    if HAVE_NUMBA:
        return _im2col_jit(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )


def nchw_to_mat(x: np.ndarray) -> np.ndarray:
    """(N, F, H, W) -> contiguous (N*H*W, F)."""
    if HAVE_NUMBA and x.flags.c_contiguous:
        return _nchw_to_mat_jit(x)
    n, f, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, f)


def mat_to_nchw(mat: np.ndarray, n: int, f: int, h: int, w: int) -> np.ndarray:
    """Contiguous (N*H*W, F) -> contiguous (N, F, H, W)."""
    if HAVE_NUMBA and mat.flags.c_contiguous:
        return _mat_to_nchw_jit(mat, n, f, h, w)
    return np.ascontiguousarray(mat.reshape(n, h, w, f).transpose(0, 3, 1, 2))


def pool_forward(x: np.ndarray, size: int, stride: int):
    """(pooled values, flat argmax per patch); ties go to the first max."""
    if HAVE_NUMBA:
        return _pool_forward_jit(np.ascontiguousarray(x), size, stride)
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def pool_backward(dout: np.ndarray, arg: np.ndarray, size: int, stride: int, h: int, w: int):
    if HAVE_NUMBA:
        return _pool_backward_jit(np.ascontiguousarray(dout), arg, size, stride, h, w)
    n, c, ho, wo = dout.shape
    dx = np.zeros(n * c * h * w)
    ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
    flat = ((ni * c + ci) * h + hi * stride + arg // size) * w + (wi * stride + arg % size)
    np.add.at(dx, flat.reshape(-1), dout.reshape(-1))
    return dx.reshape(n, c, h, w)


def relu_forward(x: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and x.flags.c_contiguous:
        return _relu_forward_jit(x.reshape(-1)).reshape(x.shape)
    return np.where(x > 0, x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA and x.flags.c_contiguous and dout.flags.c_contiguous:
        return _relu_backward_jit(x.reshape(-1), dout.reshape(-1)).reshape(x.shape)
    return np.where(x > 0, dout, 0.0)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2) -> None:
    """In-place fused Adam step with bias correction."""
    if (
        HAVE_NUMBA
        and p.flags.c_contiguous
        and g.flags.c_contiguous
        and g.shape == p.shape
    ):
        _adam_update_jit(
            p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
            lr, beta1, beta2, eps, bc1, bc2,
        )
        return
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
