"""Cluster description and schedule data types."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

from ..costmodel import ChannelProfile, DeviceProfile, ModelProfile, ServerProfile, WorkloadSpec

KINDS = ("F", "X", "AF", "SF", "B", "W", "Sync")
# Per-microbatch precedence for the frozen-prefix pipeline.
CHAIN = ("F", "X", "AF", "SF", "B", "W")

SERVER = "server"
CHANNEL = "channel"


def device_resource(i: int) -> str:
    return f"device:{i}"


@dataclass(frozen=True)
class ClusterSpec:
    devices: tuple[DeviceProfile, ...]
    channel: ChannelProfile
    server: ServerProfile
    model: ModelProfile
    workload: WorkloadSpec
    utilization: float = 1.0
    layer_bounds: tuple[int, int] | None = None  # default (1, num_layers // 4)
    splitlora_cut: int = 3

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise ValueError("cluster needs at least one device")
        if not 0 < self.utilization <= 1:
            raise ValueError(f"utilization must be in (0, 1], got {self.utilization}")
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ValueError("device ids must be unique")
        if not 0 < self.splitlora_cut < self.model.num_layers:
            raise ValueError("splitlora_cut must lie strictly inside the model")

    @property
    def bounds(self) -> tuple[int, int]:
        if self.layer_bounds is not None:
            return tuple(self.layer_bounds)
        return 1, max(1, self.model.num_layers // 4)

    def device_capacity(self, i: int) -> float:
        return self.devices[i].peak_flops * self.utilization

    @property
    def server_capacity(self) -> float:
        return self.server.peak_flops * self.utilization

    def with_utilization(self, u: float) -> ClusterSpec:
        return replace(self, utilization=u)


@dataclass(frozen=True)
class ScheduleEvent:
    kind: str
    resource: str
    microbatch: int  # -1 for round-level events (Sync and its transfers)
    start: float
    duration: float
    device: int = -1
    round: int = 0
    deps: tuple[int, ...] = ()  # indices of events that must finish first

    @property
    def end(self) -> float:
        return self.start + self.duration

    def label(self) -> str:
        who = f"d{self.device}" if self.device >= 0 else "-"
        mb = f"m{self.microbatch}" if self.microbatch >= 0 else f"r{self.round}"
        return f"{self.kind}[{who},{mb}]@{self.resource}"


@dataclass
class PipelineSchedule:
    events: list[ScheduleEvent]
    scheme: str = "splitfrozen"
    mode: str = "pipelined"
    meta: dict = field(default_factory=dict)

    @property
    def makespan(self) -> float:
        if not self.events:
            return 0.0
        return max(e.end for e in self.events) - min(e.start for e in self.events)

    def resources(self) -> list[str]:
        return sorted({e.resource for e in self.events}, key=_resource_key)

    def busy_time(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.events:
            out[e.resource] = out.get(e.resource, 0.0) + e.duration
        return out

    @property
    def bubble_time(self) -> dict[str, float]:
        """Idle time per resource between its first start and last end."""
        out = {}
        for r in self.resources():
            evs = [e for e in self.events if e.resource == r]
            span = max(e.end for e in evs) - min(e.start for e in evs)
            out[r] = max(0.0, span - sum(e.duration for e in evs))
        return out

    def on(self, resource: str) -> list[ScheduleEvent]:
        return sorted((e for e in self.events if e.resource == resource), key=lambda e: (e.start, e.end))


def _resource_key(r: str):
    if r.startswith("device:"):
        return (0, int(r.split(":")[1]))
    return (1 if r == CHANNEL else 2, 0)


def sum_durations(events: Iterable[ScheduleEvent]) -> float:
    return sum(e.duration for e in events)
