"""Brute-force references.

Nothing here touches :mod:`contextagg.tensor`; every routine is an explicit
loop over plain float64 buffers so it can anchor the vectorised code paths.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def matmul_loops(a, b) -> np.ndarray:
    """Triple-loop matrix product of 2-d arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p, q = a.shape
    q2, r = b.shape
    if q != q2:
        raise ValueError(f"inner extents differ: {a.shape} vs {b.shape}")
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            acc = 0.0
            for k in range(q):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def direct_depthwise_conv(grid, kernel) -> np.ndarray:
    """Per-channel sliding-window convolution, zero padding, stride 1.

    ``grid`` is ``[H, W, C]`` and ``kernel`` is ``[C, k, k]`` with odd ``k``.
    Output pixel (y, x) of channel c gathers ``kernel[c, dy + r, dx + r] *
    grid[y - dy, x - dx, c]`` over ``|dy|, |dx| <= r``: the kernel is indexed
    by the signed offset centre minus neighbour.
    """
    grid = np.asarray(grid, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    h, w, c = grid.shape
    k = kernel.shape[-1]
    if k % 2 == 0 or kernel.shape != (c, k, k):
        raise ValueError(f"kernel must be [C, k, k] with odd k, got {kernel.shape} for C={c}")
    r = (k - 1) // 2
    out = np.zeros_like(grid)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        sy = y - (ky - r)
                        sx = x - (kx - r)
                        if 0 <= sy < h and 0 <= sx < w:
                            acc += kernel[ch, ky, kx] * grid[sy, sx, ch]
                out[y, x, ch] = acc
    return out


def naive_attention(x, wq, wk, wv, heads: int, bq=None, bk=None, bv=None):
    """Multi-head scaled dot-product attention written as explicit loops.

    Returns ``(affinity[M, N, N], out[N, C])`` where ``out`` is the per-head
    aggregation concatenated along channels (no output projection).
    """
    x = np.asarray(x, dtype=np.float64)
    n, c = x.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    def project(w, b):
        w = np.asarray(w, dtype=np.float64)
        res = np.zeros((n, w.shape[1]))
        for i in range(n):
            for o in range(w.shape[1]):
                acc = 0.0 if b is None else float(b[o])
                for t in range(c):
                    acc += x[i, t] * w[t, o]
                res[i, o] = acc
        return res

    q, k, v = project(wq, bq), project(wk, bk), project(wv, bv)
    scale = 1.0 / math.sqrt(d)
    aff = np.zeros((heads, n, n))
    out = np.zeros((n, c))
    for m in range(heads):
        lo = m * d
        for i in range(n):
            scores = []
            for j in range(n):
                s = 0.0
                for t in range(d):
                    s += q[i, lo + t] * k[j, lo + t]
                scores.append(s * scale)
            top = max(scores)
            exps = [math.exp(s - top) for s in scores]
            total = sum(exps)
            for j in range(n):
                aff[m, i, j] = exps[j] / total
            for t in range(d):
                acc = 0.0
                for j in range(n):
                    acc += aff[m, i, j] * v[j, lo + t]
                out[i, lo + t] = acc
    return aff, out


def aggregate_loops(weights, v) -> np.ndarray:
    """Per-head ``weights[m] @ V_m`` with heads taken as contiguous channel slices."""
    weights = np.asarray(weights, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m_heads, n, _ = weights.shape
    c = v.shape[1]
    d = c // m_heads
    out = np.zeros((n, c))
    for m in range(m_heads):
        for i in range(n):
            for t in range(d):
                acc = 0.0
                for j in range(n):
                    acc += weights[m, i, j] * v[j, m * d + t]
                out[i, m * d + t] = acc
    return out


def finite_diff_grad(f: Callable[[], float], params: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. every entry of every array in ``params``.

    The arrays are perturbed in place and restored; ``f`` must read them.
    """
    grads = []
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("finite differences run in float64 only")
        if not p.flags.c_contiguous:
            raise ValueError("parameters must be C-contiguous so they can be perturbed in place")
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|)`` over entries above ``floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    mag = np.maximum(np.abs(a), np.abs(n))
    keep = mag >= floor
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(a[keep] - n[keep]) / mag[keep]))
