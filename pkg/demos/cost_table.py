"""Parameter and FLOP counts for every full-size preset at 224x224."""
from contextagg.metrics import cost_of_preset
from contextagg.network import preset_names

print(f"{'preset':<16}{'params':>12}{'GFLOPs':>10}{'dynamic':>10}")
for name in [p for p in preset_names() if not p.endswith("-mini")]:
    rep = cost_of_preset(name, 224)
    dyn = sum(s.dynamic_flops for s in rep.stages) / rep.flops
    print(f"{name:<16}{rep.params / 1e6:>11.2f}M{rep.flops / 1e9:>10.2f}{dyn:>10.1%}")
