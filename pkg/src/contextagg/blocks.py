"""Network building blocks: spatial aggregation, channel fusion, patch embedding."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .affinity import (
    AffinityMatrix,
    ConvAffinityParams,
    MixCoeffs,
    MlpAffinityParams,
    aggregate,
    conv_affinity,
    lowrank_width,
    mix_affinity,
    mlp_affinity,
    sa_affinity,
    split_heads,
)
from .errors import ConfigError, ShapeError
from .tensor import Param, Tensor

STATIC_KINDS = ("conv", "mlp", "mlp-lr")


class Module:
    """Anything that owns :class:`Param` leaves, found by walking attributes in definition order."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        yield from _walk(vars(self), prefix)

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


def _walk(fields: dict, prefix: str):
    for name, val in fields.items():
        if name.startswith("_"):
            continue
        key = prefix + name
        if isinstance(val, Param):
            yield key, val
        elif isinstance(val, Module):
            yield from val.named_params(key + ".")
        elif dataclasses.is_dataclass(val) and not isinstance(val, type):
            yield from _walk({f.name: getattr(val, f.name) for f in dataclasses.fields(val)}, key + ".")
        elif isinstance(val, (list, tuple)):
            yield from _walk({str(i): item for i, item in enumerate(val)}, key + ".")


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype="f32", bias: bool = True):
        self.weight = Param(_trunc_normal(rng, (fan_in, fan_out), 0.02), dtype)
        self.bias = Param(np.zeros(fan_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype="f32", eps: float = 1e-5):
        self.weight = Param(np.ones(dim), dtype)
        self.bias = Param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


@dataclass(frozen=True)
class AggregatorConfig:
    """Which affinities a spatial-aggregation block combines.

    ``dynamic`` switches on query/key self-attention; ``static`` picks the
    parameterised affinity (``conv``, ``mlp`` dense, ``mlp-lr`` low rank).
    Both on gives the learnable mixture.
    """

    channels: int
    heads: int
    dynamic: bool = True
    static: str | None = None
    kernel_size: int = 3
    reduction: int = 4
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} must be a positive multiple of heads {self.heads}")
        if not self.dynamic and self.static is None:
            raise ConfigError("an aggregator needs a dynamic path, a static path, or both")
        if self.static is not None:
            if self.static not in STATIC_KINDS:
                raise ConfigError(f"unknown static affinity {self.static!r}; expected one of {STATIC_KINDS}")
            if self.grid is None:
                raise ConfigError("static affinities need the token grid (H, W)")
            if self.static == "conv" and self.kernel_size % 2 == 0:
                raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
            if self.static == "mlp-lr":
                lowrank_width(self.grid[0] * self.grid[1], self.reduction)

    @property
    def kind(self) -> str:
        if self.dynamic and self.static:
            return "mixture"
        return "dynamic" if self.dynamic else "static"

    @property
    def tokens(self) -> int | None:
        return None if self.grid is None else self.grid[0] * self.grid[1]


class ContextBlock(Module):
    """Pre-norm spatial aggregation with a residual on the un-normalised input.

    ``y = aggregate(A, LN(x) W_v) W_o + x`` where ``A`` is self-attention,
    a static affinity, or ``alpha * A_sa + beta * A_static``.
    """

    def __init__(self, cfg: AggregatorConfig, rng: np.random.Generator, dtype="f32", norm: bool = True):
        c, m = cfg.channels, cfg.heads
        self.cfg = cfg
        self.norm = LayerNorm(c, dtype) if norm else None
        self.value_proj = Linear(c, c, rng, dtype)
        self.out_proj = Linear(c, c, rng, dtype)
        self.q_proj = Linear(c, c, rng, dtype) if cfg.dynamic else None
        self.k_proj = Linear(c, c, rng, dtype) if cfg.dynamic else None
        self.static = None
        if cfg.static == "conv":
            k = cfg.kernel_size
            self.static = ConvAffinityParams(Param(rng.normal(0.0, 1.0 / k, (m, k, k)), dtype), cfg.grid)
        elif cfg.static == "mlp":
            n = cfg.tokens
            self.static = MlpAffinityParams("dense", dense=Param(rng.normal(0.0, n**-0.5, (m, n, n)), dtype))
        elif cfg.static == "mlp-lr":
            n = cfg.tokens
            r = lowrank_width(n, cfg.reduction)
            w1 = Param(rng.normal(0.0, n**-0.5, (m, n, r)), dtype)
            w2 = Param(rng.normal(0.0, r**-0.5, (m, r, n)), dtype)
            self.static = MlpAffinityParams("lowrank", factors=(w1, w2))
        self.mix = MixCoeffs(Param(1.0, dtype), Param(1.0, dtype)) if cfg.kind == "mixture" else None

    def static_affinity(self) -> AffinityMatrix | None:
        if isinstance(self.static, ConvAffinityParams):
            return conv_affinity(self.static)
        if isinstance(self.static, MlpAffinityParams):
            return mlp_affinity(self.static)
        return None

    def dynamic_affinity(self, xn: Tensor) -> AffinityMatrix | None:
        if not self.cfg.dynamic:
            return None
        q = split_heads(self.q_proj(xn), self.cfg.heads)
        k = split_heads(self.k_proj(xn), self.cfg.heads)
        return sa_affinity(q, k)

    def affinity(self, xn: Tensor) -> AffinityMatrix:
        """The effective affinity for normalised input ``xn`` (materialised mixture)."""
        dyn = self.dynamic_affinity(xn)
        static = self.static_affinity()
        if dyn is not None and static is not None:
            return mix_affinity(self.mix, dyn, static)
        return dyn if dyn is not None else static

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[-1] != cfg.channels:
            raise ShapeError(f"block expects {cfg.channels} channels, got {x.shape}")
        if cfg.tokens is not None and x.shape[-2] != cfg.tokens:
            raise ShapeError(f"static affinity is laid out for grid {cfg.grid} ({cfg.tokens} tokens) but input has {x.shape[-2]}")
        xn = self.norm(x) if self.norm is not None else x
        v = self.value_proj(xn)
        if cfg.kind == "mixture":
            # (alpha A + beta S) V taken as alpha (A V) + beta (S V): same map, and the
            # shared static S never gets copied per sample.
            dyn = aggregate(self.dynamic_affinity(xn), v)
            static = aggregate(self.static_affinity(), v)
            y = T.add(T.mul(self.mix.alpha, dyn), T.mul(self.mix.beta, static))
        else:
            y = aggregate(self.affinity(xn), v)
        return T.add(self.out_proj(y), x)


def context_block_forward(x: Tensor, block: ContextBlock) -> Tensor:
    return block(x)


def pam_block(channels: int, heads: int, grid: tuple[int, int], rng: np.random.Generator, dtype="f32", norm: bool = True) -> ContextBlock:
    """Self-attention plus a dense learned static affinity, mixed linearly."""
    cfg = AggregatorConfig(channels, heads, dynamic=True, static="mlp", grid=grid)
    return ContextBlock(cfg, rng, dtype, norm)


class FeedForward(Module):
    """``y = x + W_2 GELU(W_1 LN(x))`` applied per token."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype="f32", ratio: int = 4, norm: bool = True):
        if ratio < 1:
            raise ConfigError(f"expansion ratio must be >= 1, got {ratio}")
        self.norm = LayerNorm(dim, dtype) if norm else None
        self.expand = Linear(dim, ratio * dim, rng, dtype)
        self.contract = Linear(ratio * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        xn = self.norm(x) if self.norm is not None else x
        return T.add(self.contract(T.gelu(self.expand(xn))), x)


def ffn_forward(x: Tensor, ffn: FeedForward) -> Tensor:
    return ffn(x)


def ffn_param_count(dim: int, ratio: int = 4, norm: bool = True) -> int:
    hidden = ratio * dim
    return dim * hidden + hidden + hidden * dim + dim + (2 * dim if norm else 0)


class PatchEmbed(Module):
    """Fuse non-overlapping ``p x p`` patches of a ``[..., H, W, C_in]`` grid into tokens."""

    def __init__(self, patch: int, in_channels: int, out_channels: int, rng: np.random.Generator, dtype="f32", norm: bool = True):
        if patch < 1:
            raise ConfigError(f"patch size must be positive, got {patch}")
        self.patch = patch
        self.in_channels = in_channels
        self.proj = Linear(patch * patch * in_channels, out_channels, rng, dtype)
        self.norm = LayerNorm(out_channels, dtype) if norm else None

    def __call__(self, grid: Tensor) -> Tensor:
        """Returns the output grid ``[..., H/p, W/p, C_out]``."""
        *lead, h, w, c = grid.shape
        p = self.patch
        if c != self.in_channels:
            raise ShapeError(f"patch embed expects {self.in_channels} input channels, got {c}")
        if h % p or w % p:
            raise ShapeError(f"grid {h}x{w} is not divisible by patch size {p}")
        nl = len(lead)
        x = T.reshape(grid, (*lead, h // p, p, w // p, p, c))
        x = T.permute(x, (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4))
        x = T.reshape(x, (*lead, h // p, w // p, p * p * c))
        x = self.proj(x)
        return self.norm(x) if self.norm is not None else x


def patch_embed(grid: Tensor, embed: PatchEmbed) -> Tensor:
    return embed(grid)
