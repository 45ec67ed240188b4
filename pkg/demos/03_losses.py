"""The Dice family: per-slice Dice, pairwise coupling, the combined objective.

Run:  python3 demos/03_losses.py
"""

import numpy as np

from sambd import Tensor, lambda_weight, pair_weights, total_loss

rng = np.random.default_rng(1)


def one_hot(labels):
    return np.moveaxis(np.eye(3)[labels], -1, 1)


labels = one_hot(rng.integers(0, 3, size=(3, 8, 8)))

print("== coupling weights: w_{m,n} = 1/(n-m), lambda = c_out / sum(w) ==")
for c_out in (2, 3, 5):
    w = pair_weights(c_out)
    print(f"c_out={c_out}: {len(w)} pairs, sum(w)={sum(w.values()):.6f}, lambda={lambda_weight(c_out):.6f}")

print("\n== perfect prediction attains the exact lower bounds ==")
perfect = labels.copy()
lv = total_loss(Tensor(perfect), labels)
print(f"dice {float(lv.dice):+.6f} (bound -9),  coupled {float(lv.dcd):+.6f} (bound -7.5),"
      f"  total {float(lv.total):+.6f} (bound -18)")

print("\n== the loss falls monotonically as predictions approach the labels ==")
uniform = np.full(labels.shape, 1 / 3)
for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    probs = (1 - t) * uniform + t * labels
    lv = total_loss(Tensor(probs), labels)
    print(f"t={t:4.2f}  total {float(lv.total):+9.5f}  dice {float(lv.dice):+9.5f}  coupled {float(lv.dcd):+9.5f}")

print("\n== pair breakdown at t=0.5 ==")
lv = total_loss(Tensor(0.5 * uniform + 0.5 * labels), labels)
for (m, n), term in sorted(lv.pair_terms.items()):
    print(f"  slices ({m},{n}): weight {lv.pair_weights[(m, n)]:.3f}  term {term:+.5f}")

print("\n== gradients flow: one SGD step on raw logits shrinks the loss ==")
from sambd import softmax_over_classes

logits = Tensor(rng.normal(size=(3, 3, 8, 8)) * 0.1, requires_grad=True, dtype=np.float64)
before = total_loss(softmax_over_classes(logits, axis=1), labels)
before.total.backward()
logits.data -= 5.0 * logits.grad
after = total_loss(softmax_over_classes(Tensor(logits.data), axis=1), labels)
print(f"loss {float(before.total):+.5f} -> {float(after.total):+.5f}")
