"""Train container-mini on the synthetic task, then print learned static affinity rows.

The full default run (3000 steps) takes ~17 minutes on one core; pass a step count for a quick look:
    python demos/train_and_inspect.py 300
"""
import sys

import numpy as np

from contextagg.cli import static_row
from contextagg.network import build_network, preset
from contextagg.trainer import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
cfg = TrainConfig(steps_per_epoch=max(1, steps // 10))
net = build_network(preset(cfg.preset, num_classes=cfg.classes), seed=cfg.seed)
train(cfg, net=net, on_epoch=lambda e, s, a: print(f"epoch {e}  step {s}  val_acc {a:.3f}"))

# centre-token row of head 0 in the first block of each stage, as a coarse text heat map
shades = " .:-=+*#%@"
for i, (stage, (h, w)) in enumerate(zip(net.stages, net.cfg.grids()), 1):
    row = static_row(stage.blocks[0].attn, (h // 2) * w + w // 2, 0)
    mag = np.abs(row) / max(np.abs(row).max(), 1e-12)
    print(f"stage {i} ({row.shape[0]}x{row.shape[1]}), |weight| of the centre token's row:")
    for line in mag:
        print("  " + "".join(shades[min(int(v * len(shades)), len(shades) - 1)] * 2 for v in line))
