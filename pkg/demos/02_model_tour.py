"""Architecture walk-through: encoder taps, attention gating, branch outputs, accounting.

Run:  python3 demos/02_model_tour.py
"""

import numpy as np

from sambd import ModelConfig, Tensor, build_model, count_flops, count_params, encode, forward
from sambd.model import MULTI_BRANCH, SINGLE_BRANCH, attention_maps

rng = np.random.default_rng(7)
stack = rng.normal(size=(5, 64, 64)).astype(np.float32)

cfg = ModelConfig(c_in=5, variant=MULTI_BRANCH, use_sab=True)
model = build_model(cfg, seed=0)
print(f"multi-branch model: c_in={cfg.c_in} -> c_out={cfg.c_out} predicted slices")

taps = encode(model, Tensor(stack[None]))
print(f"encoder taps: low {tuple(taps.low.shape)} (1/4 scale), high {tuple(taps.high.shape)} (1/16, context-fused)")

maps = attention_maps(model, taps.high, "high")
print(f"slice attention: {len(maps)} maps, range ({maps[0].data.min():.3f}, {maps[0].data.max():.3f}) -- sigmoid gated")

probs = forward(model, stack)
print(f"forward -> {tuple(probs.shape)} probabilities; per-voxel sums == 1: "
      f"{np.allclose(probs.data.sum(axis=1), 1, atol=1e-6)}")
print("branch outputs are slice-specific: branch0 vs branch1 max diff =",
      f"{np.abs(probs.data[0] - probs.data[1]).max():.4f}")

print("\n== parameter / FLOP accounting ==")
rows = [
    ("single-branch 1x", ModelConfig(c_in=5, variant=SINGLE_BRANCH, width_multiplier=1)),
    ("single-branch 3x (width-matched)", ModelConfig(c_in=5, variant=SINGLE_BRANCH, width_multiplier=3)),
    ("multi-branch", ModelConfig(c_in=5, variant=MULTI_BRANCH)),
    ("multi-branch + attention", ModelConfig(c_in=5, variant=MULTI_BRANCH, use_sab=True)),
]
for name, c in rows:
    m = build_model(c, seed=0)
    print(f"{name:34s} params {count_params(m):8d}   flops@64x64 {count_flops(m, 64, 64):12d}")
full = count_params(build_model(rows[3][1], seed=0))
matched = count_params(build_model(rows[1][1], seed=0))
print(f"\nmulti-branch + attention vs width-matched single branch: {100 * (full / matched - 1):+.1f}% parameters")
