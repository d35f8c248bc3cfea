"""
Reverse-mode gradients and Adam
===============================

Everything trainable in the package runs on a small float64 autodiff core.
This script builds a two-layer network, checks its gradients against
central differences and fits a toy regression with Adam.
"""

import numpy as np

from dispa.gradcheck import check_gradients
from dispa.nn import AdamState, Mlp, MlpSpec, adam_step
from dispa.tensor import Tensor

# %%
# A scalar loss and its gradient. ``backward`` only accepts scalars and
# consumes the graph, so every step rebuilds it.
w = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
(w.square().sum() * 0.5).backward()
print("d/dw of |w|^2 / 2 =", w.grad)

# %%
# Finite-difference check on a small MLP with mixed activations.
rng = np.random.default_rng(0)
net = Mlp(MlpSpec((4, 16, 16, 1), ("relu", "gelu")), seed=1)
x = rng.normal(size=(32, 4))
y = np.sin(x.sum(axis=1, keepdims=True))


def loss():
    return (net(x) - y).square().mean()


report = check_gradients(loss, net.params, n_coords=100)
print(f"checked {report.checked} coordinates, worst relative error {report.max_rel_error:.2e}")

# %%
# Fit it. The loss should fall by an order of magnitude in a few hundred steps.
opt = AdamState(lr=1e-2)
for step in range(301):
    net.params.zero_grad()
    value = loss()
    value.backward()
    adam_step(net.params, opt)
    if step % 100 == 0:
        print(f"step {step:3d}  mse {value.item():.4f}")
