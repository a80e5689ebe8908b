"""Analytic FLOP, byte and time costs for transformer fine-tuning.

Conventions used by every number this module returns:

* one multiply-add counts as 2 FLOPs;
* LayerNorm, softmax, residual adds and embeddings are not counted;
* LoRA adapters sit on the four attention projections (Q, K, V, O) of each
  adapted layer, see :data:`ADAPTED_PROJECTIONS`.

All functions are pure and linear in ``batch_size``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

FLOP_CONVENTION = "1 multiply-add = 2 FLOPs; LayerNorm/softmax/residual/embedding excluded"

# Projections carrying LoRA adapters in the cost model.
ADAPTED_PROJECTIONS = ("q", "k", "v", "o")

# Device capacities are fractions of one GPU; the server is this many GPUs.
GPUS_PER_SERVER = 4


@dataclass(frozen=True)
class ModelProfile:
    name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    bytes_per_activation_element: int = 4

    def __post_init__(self):
        for field_name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim",
                           "vocab_size", "bytes_per_activation_element"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"ModelProfile.{field_name} must be > 0")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    peak_flops: float
    assigned_layers: int = 0

    def __post_init__(self):
        if self.peak_flops <= 0:
            raise ValueError(f"device {self.device_id}: peak_flops must be > 0")
        if self.assigned_layers < 0:
            raise ValueError(f"device {self.device_id}: assigned_layers must be >= 0")


@dataclass(frozen=True)
class ChannelProfile:
    rate: float  # bits per second
    per_message_overhead: float = 0.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("channel rate must be > 0")
        if self.per_message_overhead < 0:
            raise ValueError("channel overhead must be >= 0")


@dataclass(frozen=True)
class ServerProfile:
    peak_flops: float
    max_shared_layer_start: int = 0

    def __post_init__(self):
        if self.peak_flops <= 0:
            raise ValueError("server peak_flops must be > 0")


@dataclass(frozen=True)
class WorkloadSpec:
    batch_size: int = 72
    seq_len: int = 128
    lora_rank: int = 4
    rounds: int = 1

    def __post_init__(self):
        if self.batch_size <= 0 or self.seq_len <= 0 or self.rounds < 0 or self.lora_rank < 0:
            raise ValueError(f"invalid workload {self}")

    def per_sample(self) -> WorkloadSpec:
        return replace(self, batch_size=1)


def forward_flops_per_layer(m: ModelProfile, w: WorkloadSpec) -> float:
    """Forward FLOPs of one transformer layer over the whole batch.

    ``24 d^2`` per token covers the QKV/O projections (8 d^2) and the 4x MLP
    (16 d^2); ``4 d s`` covers the score and value matmuls.
    """
    d, s = m.hidden_dim, w.seq_len
    return float(w.batch_size * s * (24 * d * d + 4 * d * s))


def lora_flops_per_layer(m: ModelProfile, w: WorkloadSpec) -> float:
    d = m.hidden_dim
    per_token = sum(2 * w.lora_rank * (d + d) for _ in ADAPTED_PROJECTIONS)
    return float(w.batch_size * w.seq_len * per_token)


def backward_flops_per_layer(m: ModelProfile, w: WorkloadSpec) -> tuple[float, float, float]:
    """Return ``(B, W_frozen, W_lora)`` for one layer.

    Base weights are frozen, so no weight gradient is materialised for them;
    only the two low-rank factors of each adapter pay a W cost.
    """
    return forward_flops_per_layer(m, w), 0.0, 2.0 * lora_flops_per_layer(m, w)


def activation_bytes(m: ModelProfile, w: WorkloadSpec) -> float:
    # independent of the cut depth: every layer emits hidden_dim-wide rows
    return float(w.batch_size * w.seq_len * m.hidden_dim * m.bytes_per_activation_element)


def adapter_param_count(m: ModelProfile, w: WorkloadSpec, num_layers: int) -> int:
    d = m.hidden_dim
    return num_layers * len(ADAPTED_PROJECTIONS) * w.lora_rank * (d + d)


def adapter_bytes(m: ModelProfile, w: WorkloadSpec, num_layers: int, bytes_per_param: int = 4) -> float:
    return float(adapter_param_count(m, w, num_layers) * bytes_per_param)


def stage_time(flops: float, capacity: float) -> float:
    if capacity <= 0:
        raise ValueError("capacity must be > 0")
    return flops / capacity


def xmit_time(nbytes: float, ch: ChannelProfile) -> float:
    return nbytes * 8.0 / ch.rate + ch.per_message_overhead


# Per-layer compositions used by the schemes.

def frozen_forward_flops(m: ModelProfile, w: WorkloadSpec, layers: int) -> float:
    return layers * forward_flops_per_layer(m, w)


def lora_forward_flops(m: ModelProfile, w: WorkloadSpec, layers: int) -> float:
    return layers * (forward_flops_per_layer(m, w) + lora_flops_per_layer(m, w))


def lora_backward_flops(m: ModelProfile, w: WorkloadSpec, layers: int) -> tuple[float, float]:
    """``(B, W)`` totals over ``layers`` adapted layers."""
    b, w_frozen, w_lora = backward_flops_per_layer(m, w)
    return layers * b, layers * (w_frozen + w_lora)


def lora_finetune_flops(m: ModelProfile, w: WorkloadSpec, layers: int) -> float:
    b, wt = lora_backward_flops(m, w, layers)
    return lora_forward_flops(m, w, layers) + b + wt


def gpu_peak_flops(server: ServerProfile, gpus: int = GPUS_PER_SERVER) -> float:
    return server.peak_flops / gpus


def fleet_from_fractions(fractions: list[float], server: ServerProfile,
                         gpus: int = GPUS_PER_SERVER) -> list[DeviceProfile]:
    gpu = gpu_peak_flops(server, gpus)
    return [DeviceProfile(device_id=i, peak_flops=f * gpu) for i, f in enumerate(fractions)]


def geometric_balance(device_stage: float, server_stage: float, xmit_stage: float) -> float:
    """Utilization that puts the transmission stage at the geometric centre.

    ``device_stage`` and ``server_stage`` are stage times at full peak; both
    scale as ``1/u`` while transmission does not. Choosing
    ``u = sqrt(device * server) / xmit`` minimises the squared log-spread of
    the three stage times, the closest one scalar can bring them together.
    """
    if min(device_stage, server_stage, xmit_stage) <= 0:
        raise ValueError("stage times must be > 0")
    return min(1.0, math.sqrt(device_stage * server_stage) / xmit_stage)
