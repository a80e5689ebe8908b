"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np

from splitfrozen import rng
from splitfrozen.lora import OptimizerState, TrainConfig, adapter_grads
from splitfrozen.numerics import ToyConfig, ToyModel, cross_entropy, forward_prefix, head_forward, train_step


def reference_mlp_forward(model: ToyModel, x: np.ndarray) -> np.ndarray:
    """Whole-model forward for the MLP-only variant, written out directly."""
    c = math.sqrt(2.0 / math.pi)
    for layer in model.layers:
        w1, b1, w2, b2 = (layer.base[k] for k in ("w1", "b1", "w2", "b2"))
        u = x @ w1.T + b1
        if "w1" in layer.adapters:
            a = layer.adapters["w1"]
            u = u + (a.scale_alpha / a.rank) * (x @ a.down.T @ a.up.T)
        h = 0.5 * u * (1.0 + np.tanh(c * (u + 0.044715 * u ** 3)))
        y = h @ w2.T
        if "w2" in layer.adapters:
            a = layer.adapters["w2"]
            y = y + (a.scale_alpha / a.rank) * (h @ a.down.T @ a.up.T)
        x = x + y + b2
    return x


def randomize_trainables(model: ToyModel, seed: int, scale: float = 0.3) -> None:
    for k, (name, p) in enumerate(sorted(model.trainable_params().items())):
        p[...] = rng.normals(rng.derive_seed(seed, k), p.shape, scale)


def model_loss(model: ToyModel, x: np.ndarray, labels: np.ndarray) -> float:
    acts = forward_prefix(model, x, 0, model.depth)
    return cross_entropy(head_forward(model, acts), labels)[0]


def finite_difference_grads(model: ToyModel, x, labels, eps: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.trainable_params().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            hi = model_loss(model, x, labels)
            p[idx] = old - eps
            lo = model_loss(model, x, labels)
            p[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        out[name] = g
    return out


def fused_sgd_step(model: ToyModel, x: np.ndarray, labels: np.ndarray, lr: float,
                   start: int = 0) -> float:
    """Monolithic backward with plain SGD: each layer's adapters are updated
    as soon as the sweep has passed below them, with no context object."""
    acts = forward_prefix(model, x, start, model.depth, cache=True)
    loss, dlogits = cross_entropy(head_forward(model, acts, cache=True), labels)
    pooled, model.head_cache = model.head_cache, None
    s = model.config.seq_len
    g = np.repeat(dlogits @ model.head["weight"] / s, s, axis=0)
    head_w, head_b = dlogits.T @ pooled, dlogits.sum(axis=0)
    model.head["weight"] -= lr * head_w
    model.head["bias"] -= lr * head_b
    for layer in reversed(model.layers[start:]):
        entries: list = []
        g = layer.backward(g, entries)
        updates = [(a, *adapter_grads(a, xin, up)) for _, _, a, xin, up in entries]
        for a, gd, gu in updates:
            a.down -= lr * gd
            a.up -= lr * gu
    return loss


def plain_frozen_prefix_training(model_cfg, x, labels, train_cfg, *, start_layer, rounds,
                                 lora_rank, lora_seed, batch_size, shuffle_seed):
    """Single-process frozen-prefix LoRA loop with no protocol machinery.

    Each round visits every sample once, in ``rng.permutation`` order of the
    ascending sample ids, seeded per round.
    """
    model = ToyModel(model_cfg)
    model.attach_adapters(range(start_layer, model_cfg.depth), lora_rank, lora_seed)
    opt = OptimizerState(train_cfg)
    s = model_cfg.seq_len
    acts = forward_prefix(model, x, 0, start_layer)
    losses = []
    for r in range(rounds):
        order = rng.permutation(len(labels), rng.derive_seed(shuffle_seed, r))
        for k in range(0, len(order), batch_size):
            ids = order[k:k + batch_size]
            xb = np.concatenate([acts[i * s:(i + 1) * s] for i in ids])
            losses.append(train_step(model, xb, np.asarray(labels)[ids], opt, start_layer))
    return losses, model


def toy_batch(cfg: ToyConfig, batch: int, seed: int):
    x = rng.normals(seed, (batch * cfg.seq_len, cfg.width))
    labels = np.array(rng.permutation(batch, seed + 1)) % cfg.num_classes
    return x, labels


def b_then_w_matches_fused(cfg: ToyConfig, seed: int, steps: int = 2, lr: float = 0.05) -> bool:
    split, fused = ToyModel(cfg), ToyModel(cfg)
    for m in (split, fused):
        m.attach_adapters(range(cfg.depth), 2, seed)
    randomize_trainables(split, seed)
    randomize_trainables(fused, seed)
    opt = OptimizerState(TrainConfig(learning_rate=lr, optimizer="sgd"))
    for k in range(steps):
        x, y = toy_batch(cfg, 3, rng.derive_seed(seed, k))
        la = train_step(split, x, y, opt)
        lb = fused_sgd_step(fused, x, y, lr)
        if la != lb:
            return False
    pa, pb = split.trainable_params(), fused.trainable_params()
    return all(np.array_equal(pa[k], pb[k]) for k in pb)


def random_toy_config(seed: int) -> ToyConfig:
    gen = np.random.default_rng(seed)
    return ToyConfig(depth=int(gen.integers(1, 5)), width=int(gen.integers(2, 17)),
                     num_classes=int(gen.integers(2, 5)), seq_len=int(gen.integers(1, 5)),
                     ffn_mult=int(gen.integers(1, 3)), attention=bool(gen.integers(0, 2)), seed=seed)
