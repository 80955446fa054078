"""Affinity matrices and multi-head context aggregation.

An affinity tensor has shape ``[..., M, N, N]``: one ``N x N`` matrix per head
that says how much token ``j`` contributes to token ``i``.  Self-attention
builds it from the input; depthwise convolution and the (transposed) token
MLP store it as parameters.  All of them feed the same :func:`aggregate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Param, Tensor


@dataclass(frozen=True)
class AffinityMatrix:
    weights: Tensor  # [..., M, N, N]
    provenance: Literal["dynamic", "static"]

    @property
    def heads(self) -> int:
        return self.weights.shape[-3]

    @property
    def tokens(self) -> int:
        return self.weights.shape[-1]


@dataclass
class ConvAffinityParams:
    """Shared ``k x k`` kernel per head laid out on an ``H x W`` token grid."""

    kernel: Param  # [M, k, k]
    grid: tuple[int, int]

    def __post_init__(self):
        k = self.kernel.shape[-1]
        if self.kernel.ndim != 3 or self.kernel.shape[1] != k:
            raise ConfigError(f"conv kernel must be [M, k, k], got {self.kernel.shape}")
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {k}")
        h, w = self.grid
        if h < 1 or w < 1:
            raise ConfigError(f"grid dims must be positive, got {self.grid}")

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[-1]

    @property
    def heads(self) -> int:
        return self.kernel.shape[0]

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class MlpAffinityParams:
    """Transposed token-MLP weights, dense ``[M, N, N]`` or a rank-``N/D`` pair."""

    mode: Literal["dense", "lowrank"]
    dense: Param | None = None  # [M, N, N]
    factors: tuple[Param, Param] | None = None  # [M, N, N/D], [M, N/D, N]

    def __post_init__(self):
        if self.mode == "dense":
            if self.dense is None or self.dense.ndim != 3 or self.dense.shape[1] != self.dense.shape[2]:
                raise ConfigError("dense MLP affinity needs a [M, N, N] parameter")
        elif self.mode == "lowrank":
            if self.factors is None:
                raise ConfigError("low-rank MLP affinity needs two factors")
            w1, w2 = self.factors
            if w1.ndim != 3 or w2.ndim != 3 or w1.shape[2] != w2.shape[1] or w1.shape[1] != w2.shape[2]:
                raise ConfigError(f"low-rank factors must be [M, N, R] and [M, R, N], got {w1.shape}, {w2.shape}")
        else:
            raise ConfigError(f"unknown MLP affinity mode {self.mode!r}")

    @property
    def heads(self) -> int:
        return (self.dense if self.mode == "dense" else self.factors[0]).shape[0]

    @property
    def tokens(self) -> int:
        return (self.dense if self.mode == "dense" else self.factors[0]).shape[1]


@dataclass
class MixCoeffs:
    alpha: Param  # scalar
    beta: Param  # scalar


def lowrank_width(tokens: int, reduction: int) -> int:
    if reduction < 1 or tokens % reduction:
        raise ConfigError(f"token count {tokens} is not divisible by reduction factor {reduction}")
    return tokens // reduction


def sa_affinity(q: Tensor, k: Tensor) -> AffinityMatrix:
    """``softmax(Q_m K_m^T / sqrt(C/M))`` for per-head ``Q, K`` of shape ``[..., M, N, C/M]``."""
    if q.shape != k.shape:
        raise ShapeError(f"query and key shapes differ: {q.shape} vs {k.shape}")
    d = q.shape[-1]
    if d < 1:
        raise ConfigError("head dimension must be at least 1")
    # Scaling Q instead of the N x N scores keeps the extra pass small.
    scores = T.matmul(T.scale(q, 1.0 / math.sqrt(d)), T.transpose(k))
    return AffinityMatrix(T.softmax(scores), "dynamic")


@lru_cache(maxsize=64)
def conv_gather_index(height: int, width: int, k: int) -> np.ndarray:
    """``[N, N]`` index into a flattened kernel padded with one trailing zero.

    Entry ``(i, j)`` is ``(i_h - j_h + r) * k + (i_w - j_w + r)`` inside the
    window and ``k*k`` (the zero slot) outside it.
    """
    r = (k - 1) // 2
    ys, xs = np.divmod(np.arange(height * width), width)
    dy = ys[:, None] - ys[None, :]
    dx = xs[:, None] - xs[None, :]
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    index = np.where(inside, (dy + r) * k + (dx + r), k * k)
    index.setflags(write=False)
    return index


def conv_affinity(params: ConvAffinityParams) -> AffinityMatrix:
    """Dense ``[M, N, N]`` affinity that reproduces a stride-1, zero-padded depthwise conv."""
    kern = params.kernel
    m, k = kern.shape[0], kern.shape[-1]
    h, w = params.grid
    flat = T.reshape(kern, (m, k * k))
    padded = T.concat([flat, Tensor._wrap(np.zeros((m, 1), dtype=kern.dtype))], axis=-1)
    weights = T.take(padded, conv_gather_index(h, w, k))
    return AffinityMatrix(weights, "static")


def mlp_affinity(params: MlpAffinityParams) -> AffinityMatrix:
    """Transpose of the token-mixing weights (product of the factors when low-rank)."""
    if params.mode == "dense":
        mat = params.dense
    else:
        w1, w2 = params.factors
        mat = T.matmul(w1, w2)
    return AffinityMatrix(T.transpose(mat), "static")


def mix_affinity(coeffs: MixCoeffs, dynamic: AffinityMatrix, static: AffinityMatrix) -> AffinityMatrix:
    """Linear mixture ``alpha * dynamic + beta * static`` (no renormalisation)."""
    if dynamic.weights.shape[-3:] != static.weights.shape[-3:]:
        raise ShapeError(
            f"cannot mix affinities with (M, N, N) = {dynamic.weights.shape[-3:]} and {static.weights.shape[-3:]}"
        )
    mixed = T.add(T.mul(coeffs.alpha, dynamic.weights), T.mul(coeffs.beta, static.weights))
    return AffinityMatrix(mixed, "dynamic")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., N, C] -> [..., M, N, C/M]`` with heads as contiguous channel slices."""
    *lead, n, c = x.shape
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    x = T.reshape(x, (*lead, n, heads, c // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.permute(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, m, n, d = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.reshape(T.permute(x, axes), (*lead, n, m * d))


def aggregate(a: AffinityMatrix, v: Tensor) -> Tensor:
    """``Concat(A_1 V_1, ..., A_M V_M)`` for ``V`` of shape ``[..., N, C]``."""
    heads = a.heads
    if v.shape[-1] % heads:
        raise ConfigError(f"channels {v.shape[-1]} not divisible by heads {heads}")
    if v.shape[-2] != a.tokens:
        raise ShapeError(f"affinity covers {a.tokens} tokens but V has {v.shape[-2]}")
    if a.weights.ndim == 3 and v.ndim > 2:
        # One affinity shared by the whole batch: fold the batch into GEMM columns.
        *lead, n, c = v.shape
        d = c // heads
        x = T.reshape(v, (-1, n, heads, d))
        b = x.shape[0]
        x = T.reshape(T.permute(x, (2, 1, 0, 3)), (heads, n, b * d))
        y = T.reshape(T.matmul(a.weights, x), (heads, n, b, d))
        return T.reshape(T.permute(y, (2, 1, 0, 3)), (*lead, n, c))
    return merge_heads(T.matmul(a.weights, split_heads(v, heads)))
