"""Tour of the tensor engine: layers, reverse-mode gradients, SGD.

Run:  python3 demos/01_autodiff_and_layers.py
"""

import numpy as np

from sambd import (
    OptimState,
    Tensor,
    bilinear_upsample,
    conv2d,
    grad_check,
    separable_conv2d,
    sgd_momentum_step,
    sigmoid,
    softmax_over_classes,
)

rng = np.random.default_rng(0)

print("== convolution ==")
x = Tensor(np.ones((1, 1, 3, 3)))
k = Tensor(np.ones((1, 1, 3, 3)))
print("3x3 ones * 3x3 ones kernel ->", conv2d(x, k).item(), "(sum of nine ones)")

x = Tensor(rng.normal(size=(1, 2, 8, 8)))
dw = Tensor(rng.normal(size=(2, 1, 3, 3)))
pw = Tensor(rng.normal(size=(4, 2, 1, 1)))
y = separable_conv2d(x, dw, pw, padding=1)
print("separable conv output:", y.shape, "(depthwise then 1x1 pointwise)")

print("\n== bilinear upsampling: half-pixel centers, edge clamping ==")
row = Tensor(np.array([[[[0.0, 2.0]]]]))
print("[0, 2] upsampled x2 ->", bilinear_upsample(row, 2).data[0, 0, 0])

print("\n== reverse-mode gradients ==")
w = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
(w * w).sum().backward()
print("d(w^2)/dw at w=3:", w.grad[0])

logits = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True, dtype=np.float64)
probs = softmax_over_classes(logits, axis=1)
print("softmax per-voxel sums:", probs.data.sum(axis=1).round(12).min(), "... all 1")

print("\n== gradient check: analytic vs central differences ==")
params = [Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.3, requires_grad=True, dtype=np.float64)]
inp = Tensor(rng.normal(size=(1, 2, 6, 6)), dtype=np.float64)


def loss():
    return (sigmoid(conv2d(inp, params[0], padding=1)) ** 2).sum()


print("max relative error:", f"{grad_check(loss, params, eps=1e-5):.2e}")

print("\n== SGD with heavy-ball momentum ==")
p = {"w": Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)}
state = OptimState(lr=0.1, momentum=0.9)
for step in range(3):
    p["w"].grad = np.array([1.0])  # constant unit gradient
    sgd_momentum_step(p, state)
    print(f"step {step}: w={p['w'].data[0]:.4f} v={state.velocity['w'][0]:.4f}")
print("(velocity builds up: steps of 0.1, 0.19, 0.271)")
