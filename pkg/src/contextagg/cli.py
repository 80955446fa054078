"""Command line: train, verify, count, viz-affinity, bench."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import ContextBlock
from .errors import CheckpointError, ConfigError, ContextAggError, DivergenceError, NumericError, ShapeError
from .metrics import bench_throughput, count_flops
from .network import REFERENCE_FLOPS_G, REFERENCE_PARAMS_M, build_network, load_checkpoint, preset, preset_names
from .trainer import TrainConfig, load_train_config, train
from .verify import run_suite

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_VERIFY = 3

WORKERS_ENV = "CAK_WORKERS"


def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        value, source = flag, "--workers"
    else:
        raw = os.environ.get(WORKERS_ENV)
        if raw is None:
            return 1
        try:
            value, source = int(raw), WORKERS_ENV
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{source} must be >= 1, got {value}")
    return value


def _resolution(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().replace(",", "x").split("x")]
    except ValueError:
        raise ConfigError(f"resolution must look like 224 or 224x224, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise ConfigError(f"resolution must be positive, got {text!r}")
    return parts[0], parts[1]


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    overrides = dict(
        preset=args.preset,
        seed=args.seed,
        workers=resolve_workers(args.workers),
        total_epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch_size,
        dataset_size=args.dataset_size,
        val_size=args.val_size,
    )
    if args.config:
        cfg = load_train_config(args.config, **overrides)
    else:
        cfg = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if cfg.preset not in preset_names():
        raise ConfigError(f"unknown preset {cfg.preset!r}; valid presets: {', '.join(preset_names())}")

    def report(epoch, step, acc):
        print(f"epoch {epoch}  step {step}  val_acc {acc:.4f}", flush=True)

    try:
        result = train(cfg, args.out_dir, on_epoch=report)
    except DivergenceError as exc:
        print(f"training diverged: {exc}; partial log kept in {args.out_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {result.train_log}, {result.val_log}, {result.checkpoint}")
    return EXIT_OK


# ---------------------------------------------------------------- verify


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    print(f"{'suite':<11} {'case':<44} {'value':<12} {'tol':<9} result")
    for r in results:
        print(r.row())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    if failed:
        for r in failed:
            print(f"FAILED {r.suite}: {r.case} (value {r.value!r} > tol {r.tol!r})", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- count


def cmd_count(args) -> int:
    cfg = preset(args.preset)
    res = _resolution(args.resolution) if args.resolution else cfg.resolution
    report = count_flops(cfg, res)
    print(f"preset {args.preset} at {res[0]}x{res[1]}")
    ref_p = REFERENCE_PARAMS_M.get(args.preset)
    line = f"params {report.params} ({report.params / 1e6:.2f}M)"
    if ref_p is not None:
        line += f"  reference {ref_p}M  deviation {100 * (report.params / (ref_p * 1e6) - 1):+.2f}%"
    print(line)
    ref_f = REFERENCE_FLOPS_G.get(args.preset) if res == (224, 224) else None
    line = f"flops {report.flops} ({report.flops / 1e9:.3f}G)"
    if ref_f is not None:
        line += f"  reference {ref_f}G  deviation {100 * (report.flops / (ref_f * 1e9) - 1):+.2f}%"
    print(line)
    for s in report.stages:
        if s.stage != "head":
            tag = "none (static only)" if s.dynamic_flops == 0 else f"{100 * s.dynamic_share:.1f}%"
            print(f"stage {s.stage} dynamic share {tag}")
    print(report.to_csv(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------- viz


VISUALIZABLE = "conv, mlp (dense, including PAM mixtures) and mlp-lr static affinities"


def static_row(block: ContextBlock, position: int, head: int) -> np.ndarray:
    """Affinity row of ``position`` for one head, shaped to the block's token grid."""
    if block.static is None:
        raise ConfigError(f"block is dynamic-only; only {VISUALIZABLE} can be visualised")
    h, w = block.cfg.grid
    if not 0 <= position < h * w:
        raise ConfigError(f"position {position} outside the {h}x{w} grid")
    if not 0 <= head < block.cfg.heads:
        raise ConfigError(f"head {head} outside [0, {block.cfg.heads})")
    with T.no_grad():
        weights = block.static_affinity().weights.data
    return np.asarray(weights[head, position], dtype=np.float64).reshape(h, w)


def write_csv(path, grid: np.ndarray) -> None:
    Path(path).write_text("".join(",".join("%.17g" % v for v in row) + "\n" for row in grid))


def read_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines()])


def to_pgm(grid: np.ndarray) -> bytes:
    """8-bit binary PGM, min-max normalised; a constant grid maps to zeros."""
    h, w = grid.shape
    lo, hi = float(np.min(grid)), float(np.max(grid))
    if hi > lo:
        pix = np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.zeros((h, w), dtype=np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, maxval, pixels = data.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError("not an 8-bit binary PGM")
    w, h = int(w), int(h)
    return np.frombuffer(data[len(data) - w * h :], dtype=np.uint8).reshape(h, w)


def _position(text: str, grid: tuple[int, int]) -> int:
    h, w = grid
    if text == "center":
        return (h // 2) * w + w // 2
    try:
        if "," in text:
            y, x = (int(v) for v in text.split(","))
            if not (0 <= y < h and 0 <= x < w):
                raise ConfigError(f"position {text} outside the {h}x{w} grid")
            return y * w + x
        return int(text)
    except ValueError:
        raise ConfigError(f"position must be 'y,x', a flat index or 'center', got {text!r}") from None


def cmd_viz_affinity(args) -> int:
    net = load_checkpoint(args.checkpoint)
    blocks = net.context_blocks()
    if not 1 <= args.stage <= len(blocks):
        raise ConfigError(f"stage must be in 1..{len(blocks)}, got {args.stage}")
    stage_blocks = blocks[args.stage - 1]
    if not 0 <= args.block < len(stage_blocks):
        raise ConfigError(f"stage {args.stage} has blocks 0..{len(stage_blocks) - 1}, got {args.block}")
    block = stage_blocks[args.block]
    if block.static is None:
        raise ConfigError(
            f"stage {args.stage} block {args.block} has only a dynamic affinity; visualisable kinds: {VISUALIZABLE}"
        )
    row = static_row(block, _position(args.position, block.cfg.grid), args.head)
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix in (".csv", ".pgm") else out
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = Path(str(stem) + ".csv"), Path(str(stem) + ".pgm")
    write_csv(csv_path, row)
    pgm_path.write_bytes(to_pgm(row))
    print(f"wrote {csv_path} and {pgm_path} ({row.shape[0]}x{row.shape[1]})")
    return EXIT_OK


# ---------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    if args.batch < 1:
        raise ConfigError(f"--batch must be >= 1, got {args.batch}")
    if args.reps < 1:
        raise ConfigError(f"--reps must be >= 1, got {args.reps}")
    workers = resolve_workers(args.workers)
    net = build_network(preset(args.preset), seed=args.seed, dtype=args.dtype)
    res = bench_throughput(net, args.batch, args.reps, workers=workers, seed=args.seed)
    print(f"{args.preset}: {res.summary()}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contextagg", description="Affinity-based context aggregation networks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a preset on the synthetic task")
    t.add_argument("--preset", default=None)
    t.add_argument("--config", default=None, help="train config file ([train] section)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out-dir", default="run")
    t.add_argument("--workers", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--steps-per-epoch", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--dataset-size", type=int, default=None)
    t.add_argument("--val-size", type=int, default=None)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="run oracle equivalence and gradient suites")
    v.add_argument("--suite", choices=["conv-equiv", "attention", "grad", "mix", "all"], default="all")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("count", help="parameter and FLOP counts")
    c.add_argument("--preset", required=True)
    c.add_argument("--resolution", default=None)
    c.add_argument("--csv", default=None, help="also write the per-stage CSV here")
    c.set_defaults(func=cmd_count)

    z = sub.add_parser("viz-affinity", help="dump one static affinity row as CSV and PGM")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--stage", type=int, required=True, help="1-based stage")
    z.add_argument("--block", type=int, required=True, help="0-based block within the stage")
    z.add_argument("--position", default="center", help="'y,x', flat token index, or 'center'")
    z.add_argument("--head", type=int, default=0)
    z.add_argument("--out", required=True, help="output stem; .csv and .pgm are appended")
    z.set_defaults(func=cmd_viz_affinity)

    b = sub.add_parser("bench", help="inference throughput")
    b.add_argument("--preset", required=True)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--dtype", choices=sorted(T.DTYPES), default="f32")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ShapeError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContextAggError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
