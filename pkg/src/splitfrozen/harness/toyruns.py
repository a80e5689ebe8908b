"""Toy-scale training runs for every scheme.

* :func:`centralized_train` is the single-process reference: LoRA on the
  layers above ``start_layer`` with the same pooled, canonically shuffled
  mini-batch order the split server uses. With ``start_layer`` equal to the
  deepest device cut it is the oracle the distributed run must reproduce;
  with ``start_layer=0`` it is the centralized LoRA baseline.
* :func:`fedlora_train` runs local full-model LoRA on every device and
  averages adapters and head after each round.
* :func:`splitlora_train` trains a device-side cut with per-device adapters
  and a shared server side, exchanging activations and gradients and
  averaging device adapters after each round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rng
from ..datapart import DeviceShard, pooled_shuffle
from ..lora import OptimizerState, TrainConfig
from ..numerics import (ToyConfig, ToyModel, backward_B, backward_W, cross_entropy, forward_prefix,
                        head_forward, train_step)
from ..protocol.engine import round_seed
from ..protocol.runner import sample_rows


def make_toy_dataset(cfg: ToyConfig, num_samples: int, seed: int = 0,
                     noise: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Class-prototype data: every token is its class prototype plus Gaussian noise.

    Returns ``x`` of shape ``(num_samples * seq_len, width)`` and integer labels.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    labels = np.arange(num_samples) % cfg.num_classes
    labels = labels[rng.permutation(num_samples, rng.derive_seed(seed, 0))]
    protos = rng.normals(rng.derive_seed(seed, 1), (cfg.num_classes, cfg.width))
    eps = rng.normals(rng.derive_seed(seed, 2), (num_samples * cfg.seq_len, cfg.width), noise)
    x = np.repeat(protos[labels], cfg.seq_len, axis=0) + eps
    return x, labels.astype(np.int64)


@dataclass
class ToyRunResult:
    scheme: str
    step_losses: list[float]
    round_losses: list[float]
    model: ToyModel

    @property
    def final_loss(self) -> float:
        return self.round_losses[-1] if self.round_losses else float("nan")


@dataclass
class _Pool:
    sample_ids: tuple[int, ...]
    labels: np.ndarray
    acts: np.ndarray
    round: int


def centralized_train(model_cfg: ToyConfig, x: np.ndarray, labels: np.ndarray, train_cfg: TrainConfig, *,
                      rounds: int, start_layer: int = 0, adapt_layers: list[int] | None = None,
                      lora_rank: int = 4, lora_seed: int = 0, lora_alpha: float | None = None,
                      pooled_batch_size: int = 72, shuffle_seed: int = 0, shuffle_window: int = 1,
                      sample_ids=None, scheme: str = "centralized") -> ToyRunResult:
    labels = np.asarray(labels)
    model = ToyModel(model_cfg)
    layers = list(range(start_layer, model.depth)) if adapt_layers is None else adapt_layers
    model.attach_adapters(layers, lora_rank, lora_seed, lora_alpha)
    opt = OptimizerState(train_cfg)
    ids = np.arange(len(labels)) if sample_ids is None else np.asarray(sample_ids)
    acts = forward_prefix(model, sample_rows(x, ids, model_cfg.seq_len), 0, start_layer)
    seq = model_cfg.seq_len
    steps, round_losses = [], []
    for first in range(0, rounds, shuffle_window):
        window = range(first, min(first + shuffle_window, rounds))
        pools = [_Pool(tuple(int(i) for i in ids), labels[ids], acts, r) for r in window]
        stream = pooled_shuffle(pools, round_seed(shuffle_seed, first))
        losses = []
        for s in range(0, len(stream), pooled_batch_size):
            chunk = stream[s:s + pooled_batch_size]
            xb = np.concatenate([it.source.acts[it.row * seq:(it.row + 1) * seq] for it in chunk])
            yb = np.array([it.source.labels[it.row] for it in chunk])
            losses.append(train_step(model, xb, yb, opt, start_layer))
        steps.extend(losses)
        round_losses.append(float(np.mean(losses)))
    return ToyRunResult(scheme, steps, round_losses, model)


def _local_order(shard: DeviceShard, shuffle_seed: int, r: int) -> list[int]:
    ids = shard.sample_indices
    return [ids[k] for k in rng.permutation(len(ids), rng.derive_seed(shuffle_seed, r, shard.device_id))]


def _snapshot(params: dict[str, np.ndarray], names) -> dict[str, np.ndarray]:
    return {n: params[n].copy() for n in names}


def _load(params: dict[str, np.ndarray], values: dict[str, np.ndarray]) -> None:
    for n, v in values.items():
        params[n][...] = v


def _weighted_mean(states: list[dict[str, np.ndarray]], weights: list[int]) -> dict[str, np.ndarray]:
    total = float(sum(weights))
    return {n: sum(w * s[n] for s, w in zip(states, weights)) / total for n in states[0]}


def fedlora_train(model_cfg: ToyConfig, x: np.ndarray, labels: np.ndarray, shards: list[DeviceShard],
                  train_cfg: TrainConfig, *, rounds: int, lora_rank: int = 4, lora_seed: int = 0,
                  lora_alpha: float | None = None, device_batch_size: int = 72,
                  shuffle_seed: int = 0) -> ToyRunResult:
    labels = np.asarray(labels)
    model = ToyModel(model_cfg)
    model.attach_adapters(range(model.depth), lora_rank, lora_seed, lora_alpha)
    params = model.trainable_params()
    names = sorted(params)
    global_state = _snapshot(params, names)
    opts = {sh.device_id: OptimizerState(train_cfg) for sh in shards}
    seq = model_cfg.seq_len
    steps, round_losses = [], []
    for r in range(rounds):
        states, weights, losses = [], [], []
        for sh in shards:
            _load(params, global_state)
            order = _local_order(sh, shuffle_seed, r)
            for s in range(0, len(order), device_batch_size):
                chunk = order[s:s + device_batch_size]
                losses.append(train_step(model, sample_rows(x, chunk, seq), labels[chunk], opts[sh.device_id]))
            states.append(_snapshot(params, names))
            weights.append(len(order))
        global_state = _weighted_mean(states, weights)
        steps.extend(losses)
        round_losses.append(float(np.mean(losses)))
    _load(params, global_state)
    return ToyRunResult("fedlora", steps, round_losses, model)


def splitlora_train(model_cfg: ToyConfig, x: np.ndarray, labels: np.ndarray, shards: list[DeviceShard],
                    train_cfg: TrainConfig, *, rounds: int, cut: int, lora_rank: int = 4,
                    lora_seed: int = 0, lora_alpha: float | None = None, device_batch_size: int = 72,
                    shuffle_seed: int = 0) -> ToyRunResult:
    labels = np.asarray(labels)
    model = ToyModel(model_cfg)
    if not 0 < cut < model.depth:
        raise ValueError(f"cut {cut} must lie strictly inside depth {model.depth}")
    model.attach_adapters(range(model.depth), lora_rank, lora_seed, lora_alpha)
    params = model.trainable_params()
    dev_names = sorted(n for n in params if n.startswith("layer") and int(n[5:n.index(".")]) < cut)
    global_dev = _snapshot(params, dev_names)
    server_opt = OptimizerState(train_cfg)
    dev_opts = {sh.device_id: OptimizerState(train_cfg) for sh in shards}
    seq = model_cfg.seq_len
    steps, round_losses = [], []
    for r in range(rounds):
        states, weights, losses = [], [], []
        for sh in shards:
            _load(params, global_dev)
            order = _local_order(sh, shuffle_seed, r)
            for s in range(0, len(order), device_batch_size):
                chunk = order[s:s + device_batch_size]
                smashed = forward_prefix(model, sample_rows(x, chunk, seq), 0, cut, cache=True)
                top = forward_prefix(model, smashed, cut, model.depth, cache=True)
                loss, dlogits = cross_entropy(head_forward(model, top, cache=True), labels[chunk])
                grad_cut, server_ctx = backward_B(model, dlogits, cut, model.depth)
                backward_W(server_ctx, server_opt)
                _, dev_ctx = backward_B(model, grad_cut, 0, cut, through_head=False)
                backward_W(dev_ctx, dev_opts[sh.device_id])
                losses.append(loss)
            states.append(_snapshot(params, dev_names))
            weights.append(len(order))
        global_dev = _weighted_mean(states, weights)
        steps.extend(losses)
        round_losses.append(float(np.mean(losses)))
    _load(params, global_dev)
    return ToyRunResult("splitlora", steps, round_losses, model)
