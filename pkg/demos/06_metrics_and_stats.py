"""The evaluation suite: overlap metrics, surface distances, paired significance.

Run:  python3 demos/06_metrics_and_stats.py
"""

import numpy as np

from sambd import dice, dice_global, paired_ttest, rvd, surface_distances, surface_points, voe

rng = np.random.default_rng(3)

print("== overlap metrics on a constructed pair ==")
ref = np.zeros((12, 12, 12), dtype=bool)
ref[3:9, 3:9, 3:9] = True
pred = np.zeros_like(ref)
pred[3:9, 3:9, 4:10] = True  # shifted one voxel along x
print(f"dice {dice(pred, ref):.4f}   voe {voe(pred, ref):.4f}   rvd {rvd(pred, ref):+.4f}")
d = dice(pred, ref)
print(f"identity voe == 1 - dice/(2 - dice): {voe(pred, ref):.12f} == {1 - d / (2 - d):.12f}")

print("\n== per-case mean vs pooled global Dice ==")
small = np.zeros_like(ref)
small[5, 5, 5] = True
pairs = [(ref, ref), (np.zeros_like(small), small)]  # one perfect case, one total miss of a tiny lesion
print(f"per-case mean {np.mean([dice(*p) for p in pairs]):.4f}   pooled global {dice_global(pairs):.4f}")
print("(the global score barely notices the missed one-voxel lesion)")

print("\n== surface distances are spacing-aware ==")
spacing = (0.8, 0.8, 2.5)  # anisotropic: thick slices
print(f"surface voxels: pred {len(surface_points(pred, spacing))}, ref {len(surface_points(ref, spacing))}")
assd, msd, rmsd = surface_distances(pred, ref, spacing)
print(f"assd {assd:.3f} mm   msd {msd:.3f} mm   rmsd {rmsd:.3f} mm   (msd >= rmsd >= assd)")

print("\n== paired t-test over per-case scores ==")
baseline = rng.normal(0.60, 0.12, size=25).clip(0, 1)
improved = (baseline + 0.04 + rng.normal(0, 0.03, size=25)).clip(0, 1)
t, p = paired_ttest(improved, baseline)
print(f"consistent +0.04 shift over 25 cases: t={t:.3f}, p={p:.4f} -> significant at 0.05: {p < 0.05}")
noise = baseline + rng.normal(0, 0.05, size=25)
t, p = paired_ttest(noise, baseline)
print(f"pure noise comparison:                t={t:.3f}, p={p:.4f} -> significant at 0.05: {p < 0.05}")
