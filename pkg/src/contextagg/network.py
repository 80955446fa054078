"""Four-stage hierarchical backbone, architecture presets and checkpoint I/O."""
from __future__ import annotations

import configparser
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import STATIC_KINDS, AggregatorConfig, ContextBlock, FeedForward, LayerNorm, Linear, Module, PatchEmbed
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ShapeError,
    TruncatedError,
    UnknownTensorError,
    VersionError,
)
from .tensor import Param, Tensor


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    patch: int
    dynamic: bool = True
    static: str | None = None
    head_dim: int = 32
    kernel_size: int = 3
    reduction: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1 or self.patch < 1:
            raise ConfigError(f"depth, dim and patch must be positive: {self}")
        if self.head_dim < 1 or self.dim % self.head_dim:
            raise ConfigError(f"dim {self.dim} is not a multiple of head_dim {self.head_dim}")
        if not self.dynamic and self.static is None:
            raise ConfigError("stage needs a dynamic or static affinity")
        if self.static is not None and self.static not in STATIC_KINDS:
            raise ConfigError(f"unknown static affinity {self.static!r}")

    @property
    def heads(self) -> int:
        return self.dim // self.head_dim

    @property
    def kind(self) -> str:
        if self.dynamic and self.static:
            return "mixture"
        return "dynamic" if self.dynamic else "static"

    @property
    def has_pos_embed(self) -> bool:
        # Static affinities already carry relative position.
        return self.kind == "dynamic"


@dataclass(frozen=True)
class NetworkConfig:
    stages: tuple[StageConfig, ...]
    resolution: tuple[int, int] = (224, 224)
    in_channels: int = 3
    num_classes: int = 1000
    name: str = "custom"
    ffn_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if not self.stages:
            raise ConfigError("network needs at least one stage")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        self.grids()

    def grids(self) -> list[tuple[int, int]]:
        """Token grid of every stage; raises naming the first stage that does not divide."""
        h, w = self.resolution
        out = []
        for i, st in enumerate(self.stages, 1):
            if h % st.patch or w % st.patch:
                raise ConfigError(
                    f"stage {i}: input grid {h}x{w} is not divisible by patch size {st.patch} "
                    f"(resolution {self.resolution[0]}x{self.resolution[1]})"
                )
            h, w = h // st.patch, w // st.patch
            if st.static == "mlp-lr" and (h * w) % st.reduction:
                raise ConfigError(f"stage {i}: {h * w} tokens not divisible by low-rank reduction {st.reduction}")
            out.append((h, w))
        return out

    def with_resolution(self, resolution) -> "NetworkConfig":
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        stages = self.stages
        if any(st.static == "mlp-lr" for st in stages):
            # Low-rank factors depend on token count; re-derive the reduction per stage.
            h, w = resolution
            fixed = []
            for st in stages:
                if h % st.patch or w % st.patch:
                    break
                h, w = h // st.patch, w // st.patch
                fixed.append(replace(st, reduction=_reduction_for(h * w)) if st.static == "mlp-lr" else st)
            else:
                stages = tuple(fixed)
        return replace(self, resolution=tuple(resolution), stages=stages)


# ---------------------------------------------------------------- presets

FULL_DEPTHS = (2, 3, 8, 3)
FULL_DIMS = (128, 256, 320, 512)
PATCHES = (4, 2, 2, 2)
MINI_DIMS = (32, 64, 80, 128)

BASE_PRESETS = ("container", "container-light", "h-deit-s", "dw-3", "mh-dw-3", "mlp", "mlp-lr", "mh-mlp-lr")
EXTRA_PRESETS = ("container-pam",)

# Reference parameter counts (millions) for the full-size presets.
REFERENCE_PARAMS_M = {
    "container": 22.1,
    "container-light": 20.0,
    "h-deit-s": 22.1,
    "dw-3": 18.7,
    "mh-dw-3": 18.6,
    "mlp": 50.9,
    "mlp-lr": 36.5,
    "mh-mlp-lr": 41.6,
}
REFERENCE_FLOPS_G = {"container": 8.1, "container-light": 3.2}

MINI_CLASSES = 12


def preset_names() -> list[str]:
    names = list(BASE_PRESETS + EXTRA_PRESETS)
    return names + [n + "-mini" for n in names]


def _reduction_for(tokens: int, target: int = 4) -> int:
    """Smallest divisor of ``tokens`` that is at least ``target`` (the token count itself if none)."""
    for d in range(target, tokens + 1):
        if tokens % d == 0:
            return d
    return tokens


def _stage_kinds(name: str, dims, head_dim: int) -> list[dict]:
    mixture = dict(dynamic=True, static="conv", head_dim=head_dim)
    conv_mh = dict(dynamic=False, static="conv", head_dim=head_dim)
    table = {
        "container": [mixture] * 4,
        "container-light": [conv_mh] * 3 + [mixture],
        "h-deit-s": [dict(dynamic=True, static=None, head_dim=head_dim)] * 4,
        "dw-3": [dict(dynamic=False, static="conv", head_dim=1)] * 4,
        "mh-dw-3": [conv_mh] * 4,
        "mlp": [dict(dynamic=False, static="mlp", head_dim=d) for d in dims],
        "mlp-lr": [dict(dynamic=False, static="mlp-lr", head_dim=d) for d in dims],
        "mh-mlp-lr": [dict(dynamic=False, static="mlp-lr", head_dim=head_dim)] * 4,
        "container-pam": [dict(dynamic=True, static="mlp", head_dim=head_dim)] * 4,
    }
    return table[name]


def preset(name: str, resolution: int | tuple[int, int] | None = None, num_classes: int | None = None) -> NetworkConfig:
    """Named architecture.  ``<name>-mini`` scales widths by 1/4 for 64x64 desk-scale runs."""
    valid = preset_names()
    if name not in valid:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(valid)}")
    mini = name.endswith("-mini")
    base = name[: -len("-mini")] if mini else name
    dims = MINI_DIMS if mini else FULL_DIMS
    head_dim = 8 if mini else 32
    res = resolution if resolution is not None else (64 if mini else 224)
    if isinstance(res, int):
        res = (res, res)
    classes = num_classes if num_classes is not None else (MINI_CLASSES if mini else 1000)
    stages = []
    h, w = res
    for depth, dim, patch, kind in zip(FULL_DEPTHS, dims, PATCHES, _stage_kinds(base, dims, head_dim)):
        h, w = h // patch, w // patch
        reduction = _reduction_for(h * w) if kind["static"] == "mlp-lr" and h * w > 0 else 4
        stages.append(StageConfig(depth=depth, dim=dim, patch=patch, kernel_size=3, reduction=reduction, **kind))
    return NetworkConfig(stages=tuple(stages), resolution=res, num_classes=classes, name=name)


# ---------------------------------------------------------------- model


class Block(Module):
    def __init__(self, cfg: AggregatorConfig, ffn_ratio: int, rng, dtype):
        self.attn = ContextBlock(cfg, rng, dtype)
        self.ffn = FeedForward(cfg.channels, rng, dtype, ratio=ffn_ratio)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ffn(self.attn(x))


class Stage(Module):
    def __init__(self, st: StageConfig, in_channels: int, grid: tuple[int, int], ffn_ratio: int, rng, dtype):
        self.grid = grid
        self.embed = PatchEmbed(st.patch, in_channels, st.dim, rng, dtype)
        self.pos = Param(np.zeros((grid[0] * grid[1], st.dim)), dtype) if st.has_pos_embed else None
        agg = AggregatorConfig(
            st.dim,
            st.heads,
            dynamic=st.dynamic,
            static=st.static,
            kernel_size=st.kernel_size,
            reduction=st.reduction,
            grid=grid if st.static else None,
        )
        self.blocks = [Block(agg, ffn_ratio, rng, dtype) for _ in range(st.depth)]

    def __call__(self, grid: Tensor) -> Tensor:
        """``[B, H, W, C_in] -> [B, H/p, W/p, C]``."""
        x = self.embed(grid)
        b, h, w, c = x.shape
        x = T.reshape(x, (b, h * w, c))
        if self.pos is not None:
            x = T.add(x, self.pos)
        for blk in self.blocks:
            x = blk(x)
        return T.reshape(x, (b, h, w, c))


class Network(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype="f32"):
        self._cfg = cfg
        self._dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x43544E52]))
        grids = cfg.grids()
        chans = cfg.in_channels
        self.stages = []
        for st, grid in zip(cfg.stages, grids):
            self.stages.append(Stage(st, chans, grid, cfg.ffn_ratio, rng, dtype))
            chans = st.dim
        self.norm = LayerNorm(chans, dtype)
        self.head = Linear(chans, cfg.num_classes, rng, dtype)

    @property
    def cfg(self) -> NetworkConfig:
        return self._cfg

    @property
    def dtype(self) -> str:
        return self._dtype

    def registry(self) -> dict[str, Param]:
        reg = {}
        for name, p in self.named_params():
            if name in reg:
                raise RuntimeError(f"duplicate parameter name {name!r}")
            p.name = name
            reg[name] = p
        return reg

    def __call__(self, batch) -> Tensor:
        """``[B, C_in, H, W] -> [B, num_classes]`` logits."""
        x = batch if isinstance(batch, Tensor) else Tensor._wrap(np.asarray(batch, dtype=T.DTYPES[self._dtype]))
        cfg = self._cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != cfg.resolution:
            raise ShapeError(
                f"expected batch [B, {cfg.in_channels}, {cfg.resolution[0]}, {cfg.resolution[1]}], got {x.shape}"
            )
        if x.shape[0] == 0:
            return Tensor._wrap(np.zeros((0, cfg.num_classes), dtype=x.dtype))
        g = T.permute(x, (0, 2, 3, 1))
        for stage in self.stages:
            g = stage(g)
        b, h, w, c = g.shape
        tokens = self.norm(T.reshape(g, (b, h * w, c)))
        return self.head(T.mean(tokens, axis=1))

    def context_blocks(self) -> list[list[ContextBlock]]:
        return [[blk.attn for blk in st.blocks] for st in self.stages]


def build_network(cfg: NetworkConfig, seed: int = 0, dtype="f32") -> Network:
    net = Network(cfg, seed=seed, dtype=dtype)
    net.registry()
    return net


SHARD = 8


def forward(net: Network, batch, workers: int = 1) -> Tensor:
    """Per-sample logits, computed in fixed shards of ``SHARD`` rows written to pre-assigned slots.

    The shard layout does not depend on ``workers``, so the output is bit-identical for any worker count.
    """
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    n = arr.shape[0]
    if n <= SHARD:
        with T.no_grad():
            return Tensor._wrap(net(arr).data)
    out = np.zeros((n, net.cfg.num_classes), dtype=T.DTYPES[net.dtype])
    starts = range(0, n, SHARD)

    def run(lo):
        with T.no_grad():
            out[lo : lo + SHARD] = net(arr[lo : lo + SHARD]).data

    if workers <= 1:
        for lo in starts:
            run(lo)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))
    return Tensor._wrap(out)


# ---------------------------------------------------------------- config files


def config_to_text(cfg: NetworkConfig, dtype: str = "f32") -> str:
    cp = configparser.ConfigParser()
    cp["network"] = {
        "name": cfg.name,
        "resolution": f"{cfg.resolution[0]}x{cfg.resolution[1]}",
        "in_channels": str(cfg.in_channels),
        "num_classes": str(cfg.num_classes),
        "ffn_ratio": str(cfg.ffn_ratio),
        "dtype": dtype,
    }
    for i, st in enumerate(cfg.stages, 1):
        cp[f"stage{i}"] = {
            "depth": str(st.depth),
            "dim": str(st.dim),
            "patch": str(st.patch),
            "dynamic": "yes" if st.dynamic else "no",
            "static": st.static or "none",
            "head_dim": str(st.head_dim),
            "kernel_size": str(st.kernel_size),
            "reduction": str(st.reduction),
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def config_from_text(text: str) -> tuple[NetworkConfig, str]:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
        net = cp["network"]
        h, w = (int(v) for v in net["resolution"].lower().split("x"))
        stages = []
        for section in sorted((s for s in cp.sections() if s.startswith("stage")), key=lambda s: int(s[5:])):
            sec = cp[section]
            static = sec.get("static", "none")
            stages.append(
                StageConfig(
                    depth=sec.getint("depth"),
                    dim=sec.getint("dim"),
                    patch=sec.getint("patch"),
                    dynamic=sec.getboolean("dynamic"),
                    static=None if static == "none" else static,
                    head_dim=sec.getint("head_dim"),
                    kernel_size=sec.getint("kernel_size", 3),
                    reduction=sec.getint("reduction", 4),
                )
            )
        cfg = NetworkConfig(
            stages=tuple(stages),
            resolution=(h, w),
            in_channels=net.getint("in_channels", 3),
            num_classes=net.getint("num_classes"),
            name=net.get("name", "custom"),
            ffn_ratio=net.getint("ffn_ratio", 4),
        )
        return cfg, net.get("dtype", "f32")
    except (KeyError, ValueError, TypeError, configparser.Error) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed network config: {exc}") from exc


def save_config(cfg: NetworkConfig, path, dtype: str = "f32") -> None:
    Path(path).write_text(config_to_text(cfg, dtype))


def load_config(path) -> tuple[NetworkConfig, str]:
    return config_from_text(Path(path).read_text())


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CTNR"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def config_path_for(path) -> Path:
    return Path(str(path) + ".cfg")


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Serialise named arrays in the CTNR layout (all integers little-endian)."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"checkpoint truncated at byte {pos} (needed {n} more, file has {len(buf)})")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {buf[:4]!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (code,) = struct.unpack("<B", take(1))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dt = _CODE_DTYPES[code]
        count_el = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(count_el * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = data.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise CheckpointError(f"checkpoint has {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(net: Network, path) -> None:
    """Write parameters to ``path`` and the network config to ``path + '.cfg'``."""
    write_tensors(path, {name: p.data for name, p in net.registry().items()})
    save_config(net.cfg, config_path_for(path), net.dtype)


def load_into(net: Network, tensors: dict[str, np.ndarray]) -> Network:
    reg = net.registry()
    for name, arr in tensors.items():
        if name not in reg:
            raise UnknownTensorError(f"checkpoint tensor {name!r} does not exist in the network")
        if arr.shape != reg[name].shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, network expects {reg[name].shape}")
    missing = sorted(set(reg) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}")
    for name, arr in tensors.items():
        reg[name].assign(arr)
    return net


def load_checkpoint(path, cfg: NetworkConfig | None = None, dtype: str | None = None) -> Network:
    tensors = read_tensors(path)
    file_dtype = "f32"
    if cfg is None:
        cfg, file_dtype = load_config(config_path_for(path))
    net = Network(cfg, dtype=dtype or file_dtype)
    return load_into(net, tensors)
