"""Oracle-backed verification suites shared by the CLI and the test-suite."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle
from . import tensor as T
from .affinity import ConvAffinityParams, aggregate, conv_affinity, sa_affinity, split_heads
from .blocks import AggregatorConfig, ContextBlock, FeedForward, Module, PatchEmbed
from .network import build_network, preset
from .tensor import Param, Tensor


@dataclass(frozen=True)
class CaseResult:
    suite: str
    case: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)

    def row(self) -> str:
        return f"{self.suite:<11} {self.case:<44} {self.value:<12.3e} {self.tol:<9.1e} {'PASS' if self.passed else 'FAIL'}"


# ---------------------------------------------------------------- conv equivalence

CONV_KERNELS = (3, 5)
CONV_GRIDS = ((4, 4), (5, 7), (8, 8))
CONV_CHANNELS = (1, 4)


def conv_via_affinity(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depthwise conv of ``grid[H, W, C]`` computed as one affinity head per channel."""
    h, w, c = grid.shape
    params = ConvAffinityParams(Param(kernel, "f64"), (h, w))
    v = Tensor(grid.reshape(h * w, c), "f64")
    return aggregate(conv_affinity(params), v).data.reshape(h, w, c)


def conv_equiv_suite(seed: int = 0, tol: float = 1e-12) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    out = []
    for k in CONV_KERNELS:
        for h, w in CONV_GRIDS:
            for c in CONV_CHANNELS:
                grid = rng.normal(size=(h, w, c))
                kernel = rng.normal(size=(c, k, k))
                diff = np.max(np.abs(conv_via_affinity(grid, kernel) - oracle.direct_depthwise_conv(grid, kernel)))
                out.append(CaseResult("conv-equiv", f"k={k} grid={h}x{w} C={c}", float(diff), tol))
    return out


# ---------------------------------------------------------------- attention equivalence


def attention_via_affinity(x, wq, wk, wv, heads, bq, bk, bv) -> tuple[np.ndarray, np.ndarray]:
    xt = Tensor(x, "f64")

    def proj(w, b):
        return T.add(T.matmul(xt, Tensor(w, "f64")), Tensor(b, "f64"))

    a = sa_affinity(split_heads(proj(wq, bq), heads), split_heads(proj(wk, bk), heads))
    return a.weights.data, aggregate(a, proj(wv, bv)).data


def attention_suite(trials: int = 20, seed: int = 0, tol: float = 1e-12) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        heads = int(rng.integers(1, 5))
        c = heads * int(rng.integers(1, 5))
        n = int(rng.integers(1, 13))
        x = rng.normal(size=(n, c))
        ws = [rng.normal(size=(c, c)) / math.sqrt(c) for _ in range(3)]
        bs = [0.1 * rng.normal(size=c) for _ in range(3)]
        aff, agg = attention_via_affinity(x, *ws, heads, *bs)
        ref_aff, ref_agg = oracle.naive_attention(x, *ws, heads, *bs)
        diff = max(np.max(np.abs(aff - ref_aff)), np.max(np.abs(agg - ref_agg)))
        out.append(CaseResult("attention", f"trial={t} N={n} C={c} M={heads}", float(diff), tol))
    return out


# ---------------------------------------------------------------- gradients


def randomize_for_gradcheck(mod: Module, rng: np.random.Generator) -> None:
    """Fan-in scaled values so every gradient is well above finite-difference round-off."""
    for name, p in mod.named_params():
        if p.ndim >= 2:
            v = rng.normal(0.0, p.shape[-2] ** -0.5, p.shape)
        elif name.endswith("norm.weight") or name.startswith("mix."):
            v = 1.0 + 0.2 * rng.normal(size=p.shape)
        else:
            v = 0.2 * rng.normal(size=p.shape)
        p.assign(v)


def gradcheck(mod: Module, x_shape, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Worst relative error between backward and central differences over params and input."""
    randomize_for_gradcheck(mod, rng)
    x = Tensor(rng.normal(size=x_shape), "f64", requires_grad=True)
    probe = Tensor(rng.normal(size=mod(x).shape), "f64")
    params = mod.params()
    T.zero_grad(params)
    x.grad = None
    T.backward(T.sum_(T.mul(mod(x), probe)))
    leaves = params + [x]
    analytic = [p.grad for p in leaves]

    def f() -> float:
        with T.no_grad():
            return float(np.sum(mod(x).data * probe.data))

    numeric = oracle.finite_diff_grad(f, [p.data for p in leaves], h=h)
    return max(oracle.max_rel_error(a, n) for a, n in zip(analytic, numeric))


GRID = (2, 4)
CHANNELS = 4
HEADS = 2


def _block(**kw) -> Callable[[np.random.Generator], Module]:
    return lambda rng: ContextBlock(AggregatorConfig(CHANNELS, HEADS, grid=GRID, **kw), rng, "f64")


GRAD_VARIANTS: dict[str, tuple[Callable[[np.random.Generator], Module], tuple[int, ...]]] = {
    "sa": (_block(dynamic=True), (2, 8, CHANNELS)),
    "conv-static": (_block(dynamic=False, static="conv"), (2, 8, CHANNELS)),
    "mlp-dense": (_block(dynamic=False, static="mlp"), (2, 8, CHANNELS)),
    "mlp-lowrank": (_block(dynamic=False, static="mlp-lr", reduction=4), (2, 8, CHANNELS)),
    "mixture": (_block(dynamic=True, static="conv"), (2, 8, CHANNELS)),
    "pam": (_block(dynamic=True, static="mlp"), (2, 8, CHANNELS)),
    "ffn": (lambda rng: FeedForward(CHANNELS, rng, "f64"), (2, 5, CHANNELS)),
    "patch-embed": (lambda rng: PatchEmbed(2, 3, CHANNELS, rng, "f64"), (2, 4, 4, 3)),
}


def grad_suite(seeds: int = 5, tol: float = 1e-5, h: float = 1e-5) -> list[CaseResult]:
    out = []
    for name, (make, shape) in GRAD_VARIANTS.items():
        for seed in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence([seed, len(name)]))
            err = gradcheck(make(rng), shape, rng, h)
            out.append(CaseResult("grad", f"{name} seed={seed}", err, tol))
    return out


# ---------------------------------------------------------------- degenerate mixtures


def _copy_shared(src: Module, dst: Module) -> None:
    theirs = dict(src.named_params())
    for name, p in dst.named_params():
        if name in theirs:
            p.assign(theirs[name].data)


def _set_mix(block: ContextBlock, alpha: float, beta: float) -> None:
    block.mix.alpha.assign(alpha)
    block.mix.beta.assign(beta)


def _mismatch(a: np.ndarray, b: np.ndarray) -> float:
    """0 when bit-identical, otherwise the largest absolute difference (at least 1)."""
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    return max(1.0, float(np.max(np.abs(a - b)))) if a.shape == b.shape else math.inf


def block_identity_cases(seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 8, CHANNELS)), "f64")
    out = []

    def pair(static: str, alpha: float, beta: float, pure: dict, label: str, zero_static: bool = False):
        r = np.random.default_rng(np.random.SeedSequence([seed, len(out)]))
        mixed = ContextBlock(AggregatorConfig(CHANNELS, HEADS, dynamic=True, static=static, grid=GRID), r, "f64")
        randomize_for_gradcheck(mixed, r)
        _set_mix(mixed, alpha, beta)
        if zero_static:
            for name, p in mixed.named_params():
                if name.startswith("static."):
                    p.assign(np.zeros(p.shape))
        ref = ContextBlock(AggregatorConfig(CHANNELS, HEADS, grid=GRID, **pure), r, "f64")
        _copy_shared(mixed, ref)
        out.append(CaseResult("mix", label, _mismatch(mixed(x).data, ref(x).data), 0.0))

    pair("conv", 1.0, 0.0, dict(dynamic=True), "conv mixture a=1 b=0 == self-attention")
    pair("conv", 0.0, 1.0, dict(dynamic=False, static="conv"), "conv mixture a=0 b=1 == static conv")
    pair("mlp", 1.0, 0.0, dict(dynamic=True), "dense mixture a=1 b=0 == self-attention")
    pair("mlp", 0.0, 1.0, dict(dynamic=False, static="mlp"), "dense mixture a=0 b=1 == static mlp")
    pair("mlp-lr", 0.0, 1.0, dict(dynamic=False, static="mlp-lr"), "low-rank mixture a=0 b=1 == static")
    pair("mlp", 1.0, 1.0, dict(dynamic=True), "pam with zero static == self-attention", zero_static=True)
    return out


def network_identity_case(seed: int = 0, batch: int = 2) -> CaseResult:
    """container-mini with alpha=1, beta=0 against h-deit-s-mini holding the same weights."""
    mixed = build_network(preset("container-mini"), seed=seed, dtype="f64")
    pure = build_network(preset("h-deit-s-mini"), seed=seed + 1, dtype="f64")
    for stage in mixed.context_blocks():
        for blk in stage:
            _set_mix(blk, 1.0, 0.0)
    _copy_shared(mixed, pure)
    x = np.random.default_rng(seed).random((batch, 3, *mixed.cfg.resolution))
    with T.no_grad():
        diff = _mismatch(mixed(x).data, pure(x).data)
    return CaseResult("mix", "container a=1 b=0 == h-deit-s (network)", diff, 0.0)


def mix_suite(seed: int = 0) -> list[CaseResult]:
    return block_identity_cases(seed) + [network_identity_case(seed)]


SUITES: dict[str, Callable[[], list[CaseResult]]] = {
    "conv-equiv": conv_equiv_suite,
    "attention": attention_suite,
    "grad": grad_suite,
    "mix": mix_suite,
}


def run_suite(name: str) -> list[CaseResult]:
    if name == "all":
        return [r for fn in SUITES.values() for r in fn()]
    return SUITES[name]()
