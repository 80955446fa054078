"""Desk-scale training: synthetic local-plus-global task, AdamW, warmup + cosine."""
from __future__ import annotations

import configparser
import io
import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from dataclasses import dataclass, fields
from itertools import combinations
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError, NumericError
from .network import Network, build_network, preset, save_checkpoint
from .tensor import Param


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "container-mini"
    # peak lr = base_lr * batch_size * workers / 512, i.e. 2e-4 at the default batch
    base_lr: float = 6.4e-3
    batch_size: int = 16  # per worker
    workers: int = 1
    total_epochs: int = 10
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # epochs draw fresh slices of a large index pool, so samples rarely repeat
    dataset_size: int = 48000
    val_size: int = 1024
    steps_per_epoch: int | None = 300
    c_local: int = 4
    c_global: int = 3
    dtype: str = "f32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.total_epochs < 1 or not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError(
                f"need 0 <= warmup_epochs <= total_epochs and total_epochs >= 1, got {self.warmup_epochs}, {self.total_epochs}"
            )
        if self.base_lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("base_lr and weight_decay must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.dataset_size < 1 or self.val_size < 0:
            raise ConfigError("dataset_size must be >= 1 and val_size >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if self.c_local < 1 or self.c_global < 1:
            raise ConfigError("c_local and c_global must be >= 1")
        if self.dtype not in T.DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(T.DTYPES)}")

    @property
    def classes(self) -> int:
        return self.c_local * self.c_global

    @property
    def global_batch(self) -> int:
        return self.batch_size * self.workers

    @property
    def epoch_steps(self) -> int:
        if self.steps_per_epoch is not None:
            return self.steps_per_epoch
        return max(1, self.dataset_size // self.global_batch)

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.epoch_steps


# ---------------------------------------------------------------- config files

_INT_FIELDS = {f.name for f in fields(TrainConfig) if f.type in ("int", "int | None")}
_FLOAT_FIELDS = {f.name for f in fields(TrainConfig) if f.type == "float"}


def train_config_to_text(cfg: TrainConfig) -> str:
    cp = configparser.ConfigParser()
    cp["train"] = {f.name: ("none" if getattr(cfg, f.name) is None else repr(getattr(cfg, f.name)) if f.name in _FLOAT_FIELDS else str(getattr(cfg, f.name))) for f in fields(TrainConfig)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def train_config_from_text(text: str, **overrides) -> TrainConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed train config: {exc}") from exc
    if "train" not in cp:
        raise ConfigError("train config needs a [train] section")
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for key, raw in cp["train"].items():
        if key not in known:
            raise ConfigError(f"unknown train config key {key!r}; known keys: {', '.join(sorted(known))}")
        try:
            if raw.strip().lower() == "none":
                values[key] = None
            elif key in _INT_FIELDS:
                values[key] = int(raw)
            elif key in _FLOAT_FIELDS:
                values[key] = float(raw)
            else:
                values[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_train_config(path, **overrides) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return train_config_from_text(text, **overrides)


# ---------------------------------------------------------------- schedule


def lr_scaled(base: float, batch: int, workers: int) -> float:
    return base * batch * workers / 512


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    peak = lr_scaled(cfg.base_lr, cfg.batch_size, cfg.workers)
    warm = cfg.warmup_epochs * cfg.epoch_steps
    total = cfg.total_steps
    if step < warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    if total == warm:
        return peak
    progress = (step - warm) / (total - warm)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr*wd*p`` then the bias-corrected step."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.params: list[Param] = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.requires_grad and p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {p.name or 'unnamed tensor'}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            data = p.data
            if self.weight_decay:
                data -= (lr * self.weight_decay) * data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def adamw_step(params, lr: float, cfg: TrainConfig, state: AdamW | None = None) -> AdamW:
    """One AdamW update; pass the returned state back in for the next step."""
    if state is None:
        state = AdamW(params, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    state.step(lr)
    return state


# ---------------------------------------------------------------- synthetic data

CELL = 8  # pixels per motif cell, so a motif spans 24x24
BLOB = 8
MIN_GRID = 3 * CELL
# A flat background keeps empty patches alike after per-token normalisation.
BACKGROUND = 0.2
NOISE = 0.1
INK = 1.0 - BACKGROUND - NOISE


def _motif_bank() -> np.ndarray:
    """3x3 binary patterns, five lit pixels each; four hand-picked shapes first."""
    plus = [1, 3, 4, 5, 7]
    cross = [0, 2, 4, 6, 8]
    tee = [0, 1, 2, 4, 7]
    ell = [0, 3, 6, 7, 8]
    chosen = [plus, cross, tee, ell]
    rest = [list(c) for c in combinations(range(9), 5) if list(c) not in chosen]
    bank = np.zeros((len(chosen) + len(rest), 9))
    for i, lit in enumerate(chosen + rest):
        bank[i, lit] = 1.0
    return bank.reshape(-1, 3, 3)


MOTIFS = _motif_bank()

# Quadrants: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
# Every arrangement anchors one marker top-left, so telling them apart needs
# the position of the second marker relative to the whole image.
RELATIONS = (
    (0, 1),  # across the top
    (0, 2),  # down the left
    (0, 3),  # diagonal
)


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    label: int


def _check_task(grid, c_local: int, c_global: int) -> tuple[int, int]:
    h, w = (grid, grid) if isinstance(grid, int) else grid
    if h < MIN_GRID or w < MIN_GRID:
        raise ConfigError(f"grid {h}x{w} too small for motifs and quadrant markers (need >= {MIN_GRID})")
    if not 1 <= c_local <= len(MOTIFS):
        raise ConfigError(f"c_local must be in [1, {len(MOTIFS)}], got {c_local}")
    if not 1 <= c_global <= len(RELATIONS):
        raise ConfigError(f"c_global must be in [1, {len(RELATIONS)}], got {c_global}")
    return h, w


def gen_sample(seed: int, index: int, grid=64, c_local: int = 4, c_global: int = 3) -> SyntheticSample:
    """Deterministic sample ``index`` of the stream keyed by ``seed``.

    Channel 0 carries one 3x3 motif (cells of ``CELL`` pixels) at a random
    spot: the local cue.  Channel 1 carries two ``BLOB``-pixel markers at
    random spots inside a quadrant pair: the global cue.
    Label = ``c_global * motif + relation``.
    """
    h, w = _check_task(grid, c_local, c_global)
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    label = int(rng.integers(c_local * c_global))
    motif, relation = divmod(label, c_global)
    img = BACKGROUND + rng.uniform(0.0, NOISE, size=(h, w, 3))
    span = 3 * CELL
    y, x = rng.integers(0, h - span + 1), rng.integers(0, w - span + 1)
    img[y : y + span, x : x + span, 0] += INK * np.kron(MOTIFS[motif], np.ones((CELL, CELL)))
    hh, hw = h // 2, w // 2
    for q in RELATIONS[relation]:
        qy, qx = divmod(q, 2)
        by = qy * hh + int(rng.integers(0, hh - BLOB + 1))
        bx = qx * hw + int(rng.integers(0, hw - BLOB + 1))
        img[by : by + BLOB, bx : bx + BLOB, 1] += INK
    return SyntheticSample(np.minimum(img, 1.0), label)


def gen_batch(seed: int, indices, grid=64, c_local: int = 4, c_global: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Images as ``[B, 3, H, W]`` plus labels."""
    samples = [gen_sample(seed, int(i), grid, c_local, c_global) for i in indices]
    h, w = (grid, grid) if isinstance(grid, int) else grid
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, h, w, 3))
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2)), labels


def gen_synthetic(seed: int, n: int, grid=64, classes: tuple[int, int] = (4, 3)) -> tuple[np.ndarray, np.ndarray]:
    """``n`` samples (indices ``0..n-1``) for a ``c_local x c_global`` label factorisation."""
    c_local, c_global = classes
    return gen_batch(seed, range(n), grid, c_local, c_global)


# Input statistics come from a fixed reference draw, never from the training seed.
STATS_SEED = 0x5EED
STATS_SAMPLES = 512


@lru_cache(maxsize=None)
def input_stats(grid: tuple[int, int], c_local: int, c_global: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of generated images."""
    x, _ = gen_batch(STATS_SEED, range(STATS_SAMPLES), grid, c_local, c_global)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def standardize(x: np.ndarray, c_local: int = 4, c_global: int = 3) -> np.ndarray:
    """Per-channel zero mean, unit variance for a ``[B, 3, H, W]`` batch.

    The image is mostly flat background, so raw pixels give every token a
    large shared component that swamps the cues once training starts.
    """
    mean, std = input_stats(tuple(x.shape[2:]), c_local, c_global)
    return (x - mean[:, None, None]) / std[:, None, None]


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    steps: int
    losses: list[float]
    lrs: list[float]
    val_acc: list[float]
    checkpoint: Path | None
    train_log: Path | None
    val_log: Path | None

    @property
    def final_val_acc(self) -> float:
        return self.val_acc[-1] if self.val_acc else float("nan")


def evaluate(net: Network, seed: int, indices, grid, c_local: int, c_global: int, batch: int = 128) -> float:
    indices = list(indices)
    if not indices:
        return float("nan")
    correct = 0
    with T.no_grad():
        for start in range(0, len(indices), batch):
            x, y = gen_batch(seed, indices[start : start + batch], grid, c_local, c_global)
            x = standardize(x, c_local, c_global)
            correct += int(np.sum(np.argmax(net(x).data, axis=1) == y))
    return correct / len(indices)


def _microbatch_grads(net: Network, params: list[Param], x: np.ndarray, y: np.ndarray, scale: float):
    sink: dict[int, np.ndarray] = {}
    logits = net(x)
    loss = T.scale(T.cross_entropy(logits, y, reduction="sum"), scale)
    T.backward(loss, sink=sink)
    return float(loss.data), [sink.get(id(p)) for p in params]


def train(cfg: TrainConfig, out_dir=None, net: Network | None = None, on_epoch=None) -> TrainResult:
    """Train ``cfg.preset`` on the synthetic task; logs and checkpoint land in ``out_dir``."""
    if net is None:
        net_cfg = preset(cfg.preset, num_classes=cfg.classes)
        net = build_network(net_cfg, seed=cfg.seed, dtype=cfg.dtype)
    grid = net.cfg.resolution
    if net.cfg.num_classes != cfg.classes:
        raise ConfigError(f"network has {net.cfg.num_classes} classes but the task has {cfg.classes}")
    if net.cfg.in_channels != 3:
        raise ConfigError("the synthetic task produces 3-channel images")
    _check_task(grid, cfg.c_local, cfg.c_global)

    params = [p for p in net.registry().values() if p.requires_grad]
    opt = AdamW(params, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    steps_per_epoch = cfg.epoch_steps
    gb = cfg.global_batch
    val_idx = range(cfg.dataset_size, cfg.dataset_size + cfg.val_size)

    train_log = val_log = ckpt = None
    tf = vf = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        train_log, val_log, ckpt = out / "train_log.csv", out / "val_log.csv", out / "model.ctnr"
        (out / "train.cfg").write_text(train_config_to_text(cfg))
        tf = open(train_log, "w", newline="")
        vf = open(val_log, "w", newline="")
        tf.write("step,lr,loss\n")
        vf.write("epoch,val_acc\n")

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    losses, lrs, accs = [], [], []
    try:
        step = 0
        for epoch in range(cfg.total_epochs):
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(cfg.dataset_size)
            for s in range(steps_per_epoch):
                pos = (s * gb) % cfg.dataset_size
                idx = np.take(order, np.arange(pos, pos + gb), mode="wrap")
                x, y = gen_batch(cfg.seed, idx, grid, cfg.c_local, cfg.c_global)
                x = standardize(x, cfg.c_local, cfg.c_global)
                shards = [(x[w * cfg.batch_size : (w + 1) * cfg.batch_size], y[w * cfg.batch_size : (w + 1) * cfg.batch_size]) for w in range(cfg.workers)]
                job = lambda xy: _microbatch_grads(net, params, xy[0], xy[1], 1.0 / gb)
                results = list(pool.map(job, shards)) if pool else [job(shards[0])]
                loss = 0.0
                grads: list[np.ndarray | None] = [None] * len(params)
                for part_loss, part in results:  # fixed worker order
                    loss += part_loss
                    for i, g in enumerate(part):
                        if g is not None:
                            grads[i] = g if grads[i] is None else grads[i] + g
                lr = lr_at(step, cfg)
                losses.append(loss)
                lrs.append(lr)
                if tf is not None:
                    tf.write(f"{step},{lr!r},{loss!r}\n")
                if not math.isfinite(loss):
                    if tf is not None:
                        tf.flush()
                    raise DivergenceError(f"loss became {loss} at step {step}")
                for p, g in zip(params, grads):
                    p.grad = g
                opt.step(lr)
                step += 1
            acc = evaluate(net, cfg.seed, val_idx, grid, cfg.c_local, cfg.c_global)
            accs.append(acc)
            if vf is not None:
                vf.write(f"{epoch},{acc!r}\n")
                vf.flush()
                tf.flush()
            if on_epoch is not None:
                on_epoch(epoch, step, acc)
        if ckpt is not None:
            save_checkpoint(net, ckpt)
    finally:
        if pool is not None:
            pool.shutdown()
        for f in (tf, vf):
            if f is not None:
                f.close()
    return TrainResult(step, losses, lrs, accs, ckpt, train_log, val_log)
