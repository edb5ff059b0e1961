"""Hot inner loops, each in two flavours.

Every kernel has a ``*_numpy`` implementation (vectorised numpy, or a plain
loop where the algorithm is inherently sequential) and a ``*_jit`` loop
compiled with numba.  The public name binds to one of them at import time
according to :data:`usat._jit.JIT_ENABLED`.  Both flavours are importable so
tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
import math

import numpy as np
from scipy.special import erf

from ._jit import JIT_ENABLED, njit

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# bilinear resampling, half-pixel-centre convention with edge clamping
# ---------------------------------------------------------------------------

def bilinear_numpy(src, out_rows, out_cols, k):
    src = np.asarray(src, dtype=np.float64)
    n_r, n_c = src.shape
    y = np.clip((np.arange(out_rows) + 0.5) * k - 0.5, 0.0, n_r - 1)
    x = np.clip((np.arange(out_cols) + 0.5) * k - 0.5, 0.0, n_c - 1)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, n_r - 1)
    x1 = np.minimum(x0 + 1, n_c - 1)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    top = src[y0][:, x0] * (1.0 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1.0 - wx) + src[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


@njit(cache=True)
def bilinear_jit(src, out_rows, out_cols, k):
    n_r, n_c = src.shape
    out = np.empty((out_rows, out_cols), dtype=np.float64)
    for r in range(out_rows):
        y = (r + 0.5) * k - 0.5
        y = min(max(y, 0.0), n_r - 1.0)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, n_r - 1)
        wy = y - y0
        for c in range(out_cols):
            x = (c + 0.5) * k - 0.5
            x = min(max(x, 0.0), n_c - 1.0)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, n_c - 1)
            wx = x - x0
            top = src[y0, x0] * (1.0 - wx) + src[y0, x1] * wx
            bot = src[y1, x0] * (1.0 - wx) + src[y1, x1] * wx
            out[r, c] = top * (1.0 - wy) + bot * wy
    return out


# ---------------------------------------------------------------------------
# step-interpolated average precision over a pre-sorted label vector
# ---------------------------------------------------------------------------

def ap_sorted_numpy(sorted_labels):
    hits = np.asarray(sorted_labels, dtype=np.float64)
    n_pos = hits.sum()
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / n_pos)


@njit(cache=True)
def ap_sorted_jit(sorted_labels):
    tp = 0.0
    acc = 0.0
    for n in range(sorted_labels.shape[0]):
        if sorted_labels[n] > 0:
            tp += 1.0
            acc += tp / (n + 1.0)
    return acc / tp


# ---------------------------------------------------------------------------
# partial Fisher-Yates shuffle driven by uint64 draws
# ---------------------------------------------------------------------------

def partial_shuffle_numpy(n, draws):
    perm = np.arange(n, dtype=np.int64)
    for i in range(draws.shape[0]):
        j = i + int(draws[i] % np.uint64(n - i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@njit(cache=True)
def partial_shuffle_jit(n, draws):
    perm = np.arange(n)
    for i in range(draws.shape[0]):
        j = i + np.int64(draws[i] % np.uint64(n - i))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm


# ---------------------------------------------------------------------------
# exact GELU and its derivative
# ---------------------------------------------------------------------------

def gelu_numpy(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad_numpy(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@njit(cache=True)
def _gelu_flat(x, out):
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT_HALF))


@njit(cache=True)
def _gelu_grad_flat(x, out):
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = 0.5 * (1.0 + math.erf(v * _SQRT_HALF)) + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)


def gelu_jit(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_flat(x.reshape(-1), out.reshape(-1))
    return out


def gelu_grad_jit(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _gelu_grad_flat(x.reshape(-1), out.reshape(-1))
    return out


# ---------------------------------------------------------------------------
# b x b block means over a square grid of vectors (superpositional averaging)
# ---------------------------------------------------------------------------

def block_mean_numpy(grid, b):
    p = grid.shape[0] // b
    d = grid.shape[2]
    return grid.reshape(p, b, p, b, d).mean(axis=(1, 3))


@njit(cache=True)
def block_mean_jit(grid, b):
    p = grid.shape[0] // b
    d = grid.shape[2]
    out = np.zeros((p, p, d), dtype=np.float64)
    for i in range(p):
        for j in range(p):
            for u in range(i * b, (i + 1) * b):
                for v in range(j * b, (j + 1) * b):
                    for k in range(d):
                        out[i, j, k] += grid[u, v, k]
            for k in range(d):
                out[i, j, k] /= b * b
    return out


# ---------------------------------------------------------------------------
# row softmax and its backward (attention weights)
# ---------------------------------------------------------------------------

def softmax_numpy(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd_numpy(attn, dattn, scale):
    return attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale


@njit(cache=True, fastmath=True)
def _softmax_rows(z, out):
    n = z.shape[1]
    for r in range(z.shape[0]):
        m = z[r, 0]
        for j in range(1, n):
            if z[r, j] > m:
                m = z[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(z[r, j] - m)
            out[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[r, j] *= inv


@njit(cache=True, fastmath=True)
def _softmax_bwd_rows(a, da, scale, out):
    n = a.shape[1]
    for r in range(a.shape[0]):
        s = 0.0
        for j in range(n):
            s += a[r, j] * da[r, j]
        for j in range(n):
            out[r, j] = a[r, j] * (da[r, j] - s) * scale


def softmax_jit(z):
    z = np.ascontiguousarray(z)
    out = np.empty_like(z)
    _softmax_rows(z.reshape(-1, z.shape[-1]), out.reshape(-1, z.shape[-1]))
    return out


def softmax_bwd_jit(attn, dattn, scale):
    attn = np.ascontiguousarray(attn)
    dattn = np.ascontiguousarray(dattn)
    out = np.empty_like(attn)
    n = attn.shape[-1]
    _softmax_bwd_rows(attn.reshape(-1, n), dattn.reshape(-1, n), attn.dtype.type(scale), out.reshape(-1, n))
    return out


if JIT_ENABLED:
    bilinear = bilinear_jit
    ap_sorted = ap_sorted_jit
    partial_shuffle = partial_shuffle_jit
    gelu = gelu_jit
    gelu_grad = gelu_grad_jit
    block_mean = block_mean_jit
    softmax = softmax_jit
    softmax_bwd = softmax_bwd_jit
else:
    bilinear = bilinear_numpy
    ap_sorted = ap_sorted_numpy
    partial_shuffle = partial_shuffle_numpy
    gelu = gelu_numpy
    gelu_grad = gelu_grad_numpy
    block_mean = block_mean_numpy
    softmax = softmax_numpy
    softmax_bwd = softmax_bwd_numpy
