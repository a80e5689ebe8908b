"""Device and server state machines for frozen-prefix split training.

Devices run their frozen prefix forward-only and ship activations plus
labels. The server catches shallow devices up to the shared depth as soon
as a batch arrives (additional forward), then per round pools everything,
shuffles it canonically and trains LoRA adapters on the shared layers, one
optimizer step per pooled mini-batch. Nothing is ever sent back to devices.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..datapart import pooled_shuffle
from ..lora import OptimizerState, TrainConfig
from ..numerics import ToyModel, forward_prefix, train_step
from .transport import Transport
from .wire import DTYPE_F32, ActivationBatch, RegisterMsg, RoundEndMsg, decode, encode


class ProtocolError(RuntimeError):
    pass


class DeviceState(enum.Enum):
    IDLE = "idle"
    FORWARDING = "forwarding"
    TRANSMITTING = "transmitting"
    DONE = "done"


@dataclass
class DeviceSession:
    device_id: int
    assigned_layers: int
    model: ToyModel
    transport: Transport | None = None
    wire_dtype: int = DTYPE_F32
    state: DeviceState = DeviceState.IDLE
    registered: bool = False
    batches_sent: int = 0

    def __post_init__(self):
        if not 0 <= self.assigned_layers <= self.model.depth:
            raise ProtocolError(
                f"device {self.device_id}: {self.assigned_layers} layers exceeds model depth {self.model.depth}")

    def _send(self, msg) -> None:
        if self.transport is not None:
            self.transport.send(encode(msg))


def device_register(session: DeviceSession) -> RegisterMsg:
    """Layer-count metadata, sent once before any activation."""
    if session.registered:
        raise ProtocolError(f"device {session.device_id} already registered")
    msg = RegisterMsg(session.device_id, session.assigned_layers)
    session._send(msg)
    session.registered = True
    return msg


def device_forward_and_send(session: DeviceSession, x: np.ndarray, labels, sample_ids,
                            round: int = 0) -> ActivationBatch:
    if not session.registered:
        raise ProtocolError(f"device {session.device_id} is not registered")
    if session.state is not DeviceState.IDLE:
        raise ProtocolError(f"device {session.device_id} is {session.state.value}, not idle")
    session.state = DeviceState.FORWARDING
    try:
        acts = forward_prefix(session.model, x, 0, session.assigned_layers, cache=False)
    except Exception:
        session.state = DeviceState.IDLE
        raise
    session.state = DeviceState.TRANSMITTING
    batch = ActivationBatch.from_array(
        acts, device_id=session.device_id, round=round, batch_id=session.batches_sent,
        produced_at_layer=session.assigned_layers, seq_len=session.model.config.seq_len,
        labels=labels, sample_ids=sample_ids, dtype=session.wire_dtype)
    session._send(batch)
    session.batches_sent += 1
    session.state = DeviceState.IDLE
    return batch


def device_end_round(session: DeviceSession, round: int) -> RoundEndMsg:
    msg = RoundEndMsg(session.device_id, round)
    session._send(msg)
    return msg


@dataclass
class IngestedBatch:
    device_id: int
    round: int
    sample_ids: tuple[int, ...]
    labels: tuple[int, ...]
    acts: np.ndarray  # rows at shared_layer_start


@dataclass
class ServerEngine:
    model: ToyModel
    train_cfg: TrainConfig
    lora_rank: int = 4
    lora_seed: int = 0
    lora_alpha: float | None = None
    adapt_layers: list[int] | None = None  # default: every shared layer
    pooled_batch_size: int = 72
    registry: dict[int, int] = field(default_factory=dict)
    shared_layer_start: int = 0
    buffer: list[IngestedBatch] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    additional_forward_layers: int = 0
    sealed: bool = False

    def __post_init__(self):
        self.opt = OptimizerState(self.train_cfg)
        self._lock = threading.Lock()

    def seal(self) -> None:
        """Close registration and attach adapters to the shared layers."""
        if self.sealed:
            return
        layers = self.adapt_layers
        if layers is None:
            layers = list(range(self.shared_layer_start, self.model.depth))
        bad = [l for l in layers if l < self.shared_layer_start]
        if bad:
            raise ProtocolError(f"adapter layers {bad} lie below the shared start {self.shared_layer_start}")
        self.model.attach_adapters(layers, self.lora_rank, self.lora_seed, self.lora_alpha)
        self.sealed = True

    def additional_layers_for(self, device_id: int) -> int:
        return self.shared_layer_start - self.registry[device_id]


def server_accept_registration(engine: ServerEngine, msg: RegisterMsg) -> None:
    with engine._lock:
        if engine.sealed:
            raise ProtocolError(f"registration of device {msg.device_id} after training started")
        if msg.device_id in engine.registry:
            raise ProtocolError(f"duplicate registration for device {msg.device_id}")
        if not 0 <= msg.assigned_layers <= engine.model.depth:
            raise ProtocolError(f"device {msg.device_id}: invalid layer count {msg.assigned_layers}")
        engine.registry[msg.device_id] = msg.assigned_layers
        engine.shared_layer_start = max(engine.registry.values())


def server_ingest(engine: ServerEngine, batch: ActivationBatch) -> None:
    with engine._lock:
        if batch.device_id not in engine.registry:
            raise ProtocolError(f"batch from unregistered device {batch.device_id}")
        if batch.produced_at_layer > engine.shared_layer_start:
            raise ProtocolError(
                f"batch produced at layer {batch.produced_at_layer} is above shared start {engine.shared_layer_start}")
        if batch.produced_at_layer != engine.registry[batch.device_id]:
            raise ProtocolError(
                f"device {batch.device_id} registered {engine.registry[batch.device_id]} layers "
                f"but sent layer {batch.produced_at_layer}")
        engine.seal()
        extra = engine.shared_layer_start - batch.produced_at_layer
        acts = forward_prefix(engine.model, batch.activations(), batch.produced_at_layer,
                              engine.shared_layer_start, cache=False)
        engine.additional_forward_layers += extra
        engine.buffer.append(IngestedBatch(batch.device_id, batch.round, batch.sample_ids,
                                           batch.labels, acts))


def server_round_step(engine: ServerEngine, shuffle_seed: int, rounds=None) -> float:
    """Pool buffered batches (optionally only ``rounds``), shuffle, train.

    Returns the mean loss over the pooled mini-batches; per-step losses are
    appended to ``engine.losses``.
    """
    with engine._lock:
        take = [b for b in engine.buffer if rounds is None or b.round in rounds]
        if not take:
            raise ProtocolError("round step with an empty buffer")
        taken = {id(b) for b in take}
        engine.buffer = [b for b in engine.buffer if id(b) not in taken]
        engine.seal()
        seq = engine.model.config.seq_len
        stream = pooled_shuffle(take, shuffle_seed)
        step_losses = []
        for start in range(0, len(stream), engine.pooled_batch_size):
            chunk = stream[start:start + engine.pooled_batch_size]
            x = np.concatenate([it.source.acts[it.row * seq:(it.row + 1) * seq] for it in chunk])
            y = np.array([it.source.labels[it.row] for it in chunk])
            step_losses.append(train_step(engine.model, x, y, engine.opt, engine.shared_layer_start))
        engine.losses.extend(step_losses)
        return float(np.mean(step_losses))


def server_handle(engine: ServerEngine, frame: bytes):
    msg = decode(frame)
    if isinstance(msg, RegisterMsg):
        server_accept_registration(engine, msg)
    elif isinstance(msg, ActivationBatch):
        server_ingest(engine, msg)
    return msg


def round_seed(shuffle_seed: int, round: int) -> int:
    return rng.derive_seed(shuffle_seed, round)


def serve(engine: ServerEngine, transport: Transport, num_rounds: int, shuffle_seed: int,
          shuffle_window: int = 1, timeout: float | None = 30.0) -> list[float]:
    """Consume frames until ``num_rounds`` rounds are trained.

    A round is trained once every registered device has sent its round-end
    marker. With ``shuffle_window > 1`` several rounds are pooled into one
    shuffle.
    """
    ended: dict[int, set[int]] = {}
    round_losses: list[float] = []
    pending: list[int] = []
    done = 0
    while done < num_rounds:
        frame = transport.recv(timeout)
        if frame is None:
            raise ProtocolError(f"transport closed after {done} of {num_rounds} rounds")
        msg = server_handle(engine, frame)
        if not isinstance(msg, RoundEndMsg):
            continue
        ended.setdefault(msg.round, set()).add(msg.device_id)
        # rounds complete strictly in order
        while done + len(pending) < num_rounds and ended.get(done + len(pending), set()) >= set(engine.registry):
            pending.append(done + len(pending))
            if len(pending) == shuffle_window or done + len(pending) == num_rounds:
                round_losses.append(server_round_step(engine, round_seed(shuffle_seed, pending[0]), set(pending)))
                done += len(pending)
                pending = []
    return round_losses
