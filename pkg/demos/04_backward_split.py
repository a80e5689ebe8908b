"""
Splitting the backward pass
===========================

With frozen base weights, backward has two separable parts:

* **B** propagates the loss gradient down to the layer inputs. The next
  layer down needs it right away.
* **W** turns the cached inputs and output gradients into adapter gradients
  and applies the optimizer. Nothing waits for it.

This script shows that running B and then W gives exactly the result of a
monolithic backward, and that the gradients agree with finite differences.
"""

# %%
import numpy as np

from splitfrozen import rng
from splitfrozen.lora import OptimizerState, TrainConfig
from splitfrozen.numerics import (ToyConfig, ToyModel, backward_B, backward_W, cross_entropy,
                                  forward_prefix, head_forward)

cfg = ToyConfig(depth=3, width=8, seq_len=3, attention=True, seed=2)
model = ToyModel(cfg)
model.attach_adapters(range(3), rank=2, seed=0)
for k, p in enumerate(model.trainable_params().values()):
    p[...] = rng.normals(k, p.shape, 0.3)
x = rng.normals(10, (4 * cfg.seq_len, cfg.width))
labels = np.array([0, 1, 2, 1])

# %%
# B phase: forward with caching, then input gradients only. The context
# holds everything W needs.
acts = forward_prefix(model, x, 0, cfg.depth, cache=True)
loss, dlogits = cross_entropy(head_forward(model, acts, cache=True), labels)
dx, ctx = backward_B(model, dlogits, 0, cfg.depth)
print(f"loss {loss:.6f}; input gradient norm {np.linalg.norm(dx):.6f}")
grads = ctx.gradients()

# %%
# Central differences on every trainable parameter.
def loss_at():
    a = forward_prefix(model, x, 0, cfg.depth)
    return cross_entropy(head_forward(model, a), labels)[0]

eps = 1e-5
worst = 0.0
for name, p in model.trainable_params().items():
    fd = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + eps
        hi = loss_at()
        p[idx] = old - eps
        lo = loss_at()
        p[idx] = old
        fd[idx] = (hi - lo) / (2 * eps)
    worst = max(worst, np.linalg.norm(grads[name] - fd) / np.linalg.norm(fd))
print(f"worst relative gradient error: {worst:.2e}")

# %%
# W phase: apply the update. Running it twice is an ordering error.
backward_W(ctx, OptimizerState(TrainConfig(learning_rate=0.05, optimizer="sgd")))
try:
    backward_W(ctx, OptimizerState(TrainConfig(learning_rate=0.05, optimizer="sgd")))
except Exception as exc:
    print("second W rejected:", exc)
