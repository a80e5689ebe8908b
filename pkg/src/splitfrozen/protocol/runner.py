"""End-to-end frozen-prefix split training over a transport."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from ..datapart import DeviceShard
from ..lora import TrainConfig
from ..numerics import ToyConfig, ToyModel
from .engine import (DeviceSession, DeviceState, ServerEngine, device_end_round,
                     device_forward_and_send, device_register, serve)
from .transport import LoopbackTransport, RecordingTransport, Transport, socket_pair
from .wire import DTYPE_F64


@dataclass
class SplitRunResult:
    step_losses: list[float]
    round_losses: list[float]
    server: ServerEngine
    device_model: ToyModel
    device_digest_before: str
    device_digest_after: str
    batches_sent: dict[int, int] = field(default_factory=dict)

    @property
    def model(self) -> ToyModel:
        return self.server.model


def sample_rows(x: np.ndarray, idx: Sequence[int], seq_len: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    rows = (idx[:, None] * seq_len + np.arange(seq_len)).ravel()
    return x[rows]


def _drive_devices(sessions: list[DeviceSession], shards: list[DeviceShard], x, labels,
                   rounds: int, device_batch_size: int, transport: Transport) -> None:
    seq = sessions[0].model.config.seq_len if sessions else 1
    for s in sessions:
        device_register(s)
    for r in range(rounds):
        for s, shard in zip(sessions, shards):
            ids = shard.sample_indices
            for start in range(0, len(ids), device_batch_size):
                chunk = ids[start:start + device_batch_size]
                device_forward_and_send(s, sample_rows(x, chunk, seq), labels[chunk], chunk, round=r)
            device_end_round(s, r)
    for s in sessions:
        s.state = DeviceState.DONE
    transport.close()


def run_splitfrozen(model_cfg: ToyConfig, x: np.ndarray, labels: np.ndarray,
                    shards: list[DeviceShard], depths: Sequence[int], train_cfg: TrainConfig, *,
                    rounds: int, lora_rank: int = 4, lora_seed: int = 0,
                    lora_alpha: float | None = None, adapt_layers: list[int] | None = None,
                    pooled_batch_size: int = 72, device_batch_size: int = 72,
                    shuffle_seed: int = 0, shuffle_window: int = 1, transport: str = "loopback",
                    record: BinaryIO | None = None, wire_dtype: int = DTYPE_F64) -> SplitRunResult:
    """Train with one device session per shard; ``depths[i]`` is shard i's prefix."""
    if len(depths) != len(shards):
        raise ValueError("need one depth per shard")
    labels = np.asarray(labels)
    device_model = ToyModel(model_cfg)  # shared read-only frozen prefix
    server = ServerEngine(ToyModel(model_cfg), train_cfg, lora_rank=lora_rank, lora_seed=lora_seed,
                          lora_alpha=lora_alpha, adapt_layers=adapt_layers,
                          pooled_batch_size=pooled_batch_size)
    digest_before = device_model.base_digest()

    if transport == "loopback":
        tx = rx = LoopbackTransport()
    elif transport == "socket":
        tx, rx = socket_pair()
    else:
        raise ValueError(f"unknown transport {transport!r}")
    if record is not None:
        tx = RecordingTransport(tx, record)

    sessions = [DeviceSession(sh.device_id, int(d), device_model, tx, wire_dtype)
                for sh, d in zip(shards, depths)]
    errors: list[BaseException] = []

    def producer():
        try:
            _drive_devices(sessions, shards, x, labels, rounds, device_batch_size, tx)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)
            tx.close()

    if transport == "loopback":
        producer()
        round_losses = serve(server, rx, rounds, shuffle_seed, shuffle_window)
    else:
        t = threading.Thread(target=producer, daemon=True)
        t.start()
        try:
            round_losses = serve(server, rx, rounds, shuffle_seed, shuffle_window)
        finally:
            t.join()
    if errors:
        raise errors[0]
    return SplitRunResult(list(server.losses), round_losses, server, device_model,
                          digest_before, device_model.base_digest(),
                          {s.device_id: s.batches_sent for s in sessions})
