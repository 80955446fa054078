"""Parameter counts, analytic FLOPs and throughput.

FLOPs are 2 x multiply-accumulates.  Norms, softmax and GELU are left out.
"""
from __future__ import annotations

import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .network import Network, NetworkConfig, StageConfig, forward, preset


@dataclass(frozen=True)
class StageCost:
    stage: str  # "1".."4" or "head"
    params: int
    flops: int
    dynamic_flops: int

    @property
    def dynamic_share(self) -> float:
        return self.dynamic_flops / self.flops if self.flops else 0.0


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int
    stages: tuple[StageCost, ...]

    @property
    def dynamic_flops(self) -> int:
        return sum(s.dynamic_flops for s in self.stages)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("stage,params,flops,dynamic_flops\n")
        for s in self.stages:
            buf.write(f"{s.stage},{s.params},{s.flops},{s.dynamic_flops}\n")
        return buf.getvalue()


def count_params(net: Network) -> int:
    return sum(p.size for p in net.registry().values())


def _linear(n: int, cin: int, cout: int) -> int:
    return 2 * n * cin * cout


def aggregation_flops(st: StageConfig, tokens: int) -> tuple[int, int]:
    """(total, dynamic) FLOPs of one block's affinity construction plus ``A V``."""
    n, c = tokens, st.dim
    if st.dynamic:
        # Q K^T and A V; a mixed-in static matrix adds no per-token work.
        dyn = 4 * n * n * c
        return dyn, dyn
    if st.static == "conv":
        return 2 * n * st.kernel_size**2 * c, 0
    if st.static == "mlp":
        return 2 * n * n * c, 0
    # Low rank applied as two thin products: W2 V then W1 (.)
    return 4 * n * n * c // st.reduction, 0


def _stage_params(st: StageConfig, cin: int, tokens: int, ffn_ratio: int) -> int:
    c, m, p = st.dim, st.heads, st.patch
    embed = p * p * cin * c + c + 2 * c
    pos = tokens * c if st.has_pos_embed else 0
    hidden = ffn_ratio * c
    block = 2 * c + 2 * (c * c + c)
    if st.dynamic:
        block += 2 * (c * c + c)
    if st.static == "conv":
        block += m * st.kernel_size**2
    elif st.static == "mlp":
        block += m * tokens * tokens
    elif st.static == "mlp-lr":
        block += 2 * m * tokens * (tokens // st.reduction)
    if st.dynamic and st.static:
        block += 2
    block += 2 * c + c * hidden + hidden + hidden * c + c
    return embed + pos + st.depth * block


def count_flops(net: Network | NetworkConfig, resolution=None) -> CostReport:
    cfg = net.cfg if isinstance(net, Network) else net
    if resolution is not None:
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        if tuple(resolution) != cfg.resolution:
            if any(r < 1 for r in resolution):
                raise ConfigError(f"resolution must be positive, got {resolution}")
            cfg = cfg.with_resolution(resolution)
    grids = cfg.grids()
    rows = []
    cin = cfg.in_channels
    for i, (st, (h, w)) in enumerate(zip(cfg.stages, grids), 1):
        n, c = h * w, st.dim
        flops = _linear(n, st.patch * st.patch * cin, c)
        agg, dyn = aggregation_flops(st, n)
        per_block = 2 * _linear(n, c, c) + agg
        if st.dynamic:
            per_block += 2 * _linear(n, c, c)
        per_block += _linear(n, c, cfg.ffn_ratio * c) + _linear(n, cfg.ffn_ratio * c, c)
        flops += st.depth * per_block
        rows.append(StageCost(str(i), _stage_params(st, cin, n, cfg.ffn_ratio), flops, st.depth * dyn))
        cin = c
    head_params = 2 * cin + cin * cfg.num_classes + cfg.num_classes
    rows.append(StageCost("head", head_params, _linear(1, cin, cfg.num_classes), 0))
    return CostReport(sum(r.params for r in rows), sum(r.flops for r in rows), tuple(rows))


@dataclass(frozen=True)
class BenchResult:
    images_per_sec: float
    median_seconds: float
    batch: int
    dtype: str
    workers: int
    repetitions: int

    def summary(self) -> str:
        return (
            f"{self.images_per_sec:.2f} images/s (median of {self.repetitions} reps, "
            f"{self.median_seconds * 1e3:.2f} ms/batch, batch={self.batch}, dtype={self.dtype}, workers={self.workers})"
        )


def bench_throughput(
    net: Network, batch: int, repetitions: int = 10, warmup: int = 1, workers: int = 1, seed: int = 0
) -> BenchResult:
    """Median inference throughput of ``net`` on random inputs, gradients off."""
    if batch < 1:
        raise ConfigError(f"batch must be at least 1, got {batch}")
    if repetitions < 1:
        raise ConfigError(f"repetitions must be at least 1, got {repetitions}")
    cfg = net.cfg
    x = np.random.default_rng(seed).random((batch, cfg.in_channels, *cfg.resolution)).astype(T.DTYPES[net.dtype])
    times = []
    with T.no_grad():
        for _ in range(warmup):
            forward(net, x, workers=workers)
        for _ in range(repetitions):
            t0 = time.perf_counter()
            forward(net, x, workers=workers)
            times.append(time.perf_counter() - t0)
    med = max(statistics.median(times), 1e-12)
    return BenchResult(batch / med, med, batch, net.dtype, workers, repetitions)


def cost_of_preset(name: str, resolution=None) -> CostReport:
    """Analytic cost without allocating weights."""
    return count_flops(preset(name), resolution)


__all__ = [
    "BenchResult",
    "CostReport",
    "StageCost",
    "bench_throughput",
    "count_flops",
    "count_params",
    "cost_of_preset",
]
