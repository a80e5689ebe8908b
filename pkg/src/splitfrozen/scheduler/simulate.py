"""Layer allocation and pipeline simulation for the frozen-prefix scheme and baselines.

Frozen-prefix microbatch ``m`` belongs to device ``m % D``. Its events are

    F  (device)   frozen forward of the device's prefix
    X  (channel)  activation upload, one shared FIFO link
    AF (server)   additional forward up to the deepest cut (omitted when 0)
    SF (server)   forward through the shared, LoRA-adapted layers
    B  (server)   input-gradient pass
    W  (server)   adapter weight update

Server priority is AF > SF > B > W, so W fills otherwise-idle server time
(``mode="pipelined"``). ``mode="fused"`` runs each W straight after its B;
``mode="sequential"`` chains every event end to end with no overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .. import costmodel as cm
from .engine import TaskGraph, run
from .model import CHANNEL, SERVER, ClusterSpec, PipelineSchedule, device_resource

MODES = ("pipelined", "fused", "sequential")
BASELINES = ("cenlora", "fedlora", "splitlora")
SCHEMES = ("splitfrozen",) + BASELINES

# Server priority ranks (lower runs first).
_SERVER_RANK = {"Sync": 0, "AF": 0, "F": 1, "SF": 1, "B": 2, "W": 3}
_FUSED_W_RANK = -1

# Relative slack when comparing stage times during allocation.
ALLOC_RTOL = 1e-9


class AllocationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# allocation

def _check_bounds(cluster: ClusterSpec) -> tuple[int, int]:
    lo, hi = cluster.bounds
    if lo < 0 or hi < lo or hi > cluster.model.num_layers:
        raise AllocationError(f"infeasible layer bounds [{lo}, {hi}] for a "
                              f"{cluster.model.num_layers}-layer model")
    return lo, hi


def device_stage_time(cluster: ClusterSpec, i: int, layers: int) -> float:
    """Forward-plus-upload time of one microbatch on device ``i`` with ``layers`` frozen layers."""
    m, w = cluster.model, cluster.workload
    return (cm.stage_time(cm.frozen_forward_flops(m, w, layers), cluster.device_capacity(i))
            + cm.xmit_time(cm.activation_bytes(m, w), cluster.channel))


def _fits(t: float, ref: float) -> bool:
    return t <= ref * (1.0 + ALLOC_RTOL)


def allocate_layers(cluster: ClusterSpec) -> list[int]:
    """Prefix depth per device, paced by the most capable device.

    The fastest device takes the deepest allowed prefix; its stage time is
    the pipeline pace. Every other device takes the deepest prefix whose
    stage time stays within that pace (the lower bound if none does). More
    capable devices therefore never get fewer layers, and a homogeneous
    fleet gets identical depths.
    """
    lo, hi = _check_bounds(cluster)
    D = len(cluster.devices)
    fastest = max(range(D), key=lambda i: (cluster.device_capacity(i), -i))
    ref = device_stage_time(cluster, fastest, hi)
    depths = []
    for i in range(D):
        fit = [L for L in range(lo, hi + 1) if _fits(device_stage_time(cluster, i, L), ref)]
        depths.append(max(fit) if fit else lo)
    return depths


# ---------------------------------------------------------------------------
# per-microbatch durations

@dataclass(frozen=True)
class StageDurations:
    F: float
    X: float
    AF: float
    SF: float
    B: float
    W: float


def frozen_durations(cluster: ClusterSpec, depths: list[int]) -> list[StageDurations]:
    m, w = cluster.model, cluster.workload
    shared = max(depths)
    top = m.num_layers - shared
    S = cluster.server_capacity
    x = cm.xmit_time(cm.activation_bytes(m, w), cluster.channel)
    sf = cm.stage_time(cm.lora_forward_flops(m, w, top), S)
    b, wt = cm.lora_backward_flops(m, w, top)
    out = []
    for i, L in enumerate(depths):
        out.append(StageDurations(
            F=cm.stage_time(cm.frozen_forward_flops(m, w, L), cluster.device_capacity(i)),
            X=x,
            AF=cm.stage_time(cm.frozen_forward_flops(m, w, shared - L), S),
            SF=sf, B=cm.stage_time(b, S), W=cm.stage_time(wt, S)))
    return out


def balanced_utilization(cluster: ClusterSpec, depths: list[int] | None = None) -> float:
    """Utilization that brings device, channel and server stage times closest together.

    Device and server stage times scale with ``1/u``, transmission does not;
    see :func:`costmodel.geometric_balance`.
    """
    full = cluster.with_utilization(1.0)
    depths = allocate_layers(full) if depths is None else depths
    durs = frozen_durations(full, depths)
    D = len(durs)
    dev = sum(d.F for d in durs) / D
    srv = sum(d.AF for d in durs) / D + durs[0].SF + durs[0].B + durs[0].W
    return cm.geometric_balance(dev, srv, durs[0].X)


def _check_depths(cluster: ClusterSpec, depths: list[int]) -> None:
    if len(depths) != len(cluster.devices):
        raise ValueError(f"expected {len(cluster.devices)} depths, got {len(depths)}")
    if any(not 0 <= L < cluster.model.num_layers for L in depths):
        raise ValueError(f"depths {depths} outside [0, {cluster.model.num_layers})")


# ---------------------------------------------------------------------------
# frozen-prefix pipeline

def _server_rank(kind: str, mode: str) -> int:
    if kind == "W" and mode == "fused":
        return _FUSED_W_RANK
    return _SERVER_RANK[kind]


def simulate_splitfrozen(cluster: ClusterSpec, depths: list[int], num_microbatches: int,
                         mode: str = "pipelined", device_buffer: int = 1) -> PipelineSchedule:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if device_buffer < 0:
        raise ValueError("device_buffer must be >= 0")
    _check_depths(cluster, depths)
    durs = frozen_durations(cluster, depths)
    D = len(depths)
    g = TaskGraph()
    x_of: dict[tuple[int, int], int] = {}
    for mb in range(num_microbatches):
        i, r = mb % D, mb // D
        d = durs[i]
        dev = cluster.devices[i].device_id
        common = dict(microbatch=mb, device=dev, round=r)
        buf = x_of.get((i, r - 1 - device_buffer))
        f = g.add("F", device_resource(dev), d.F, deps=(buf,), tie=(mb,), **common)
        x = g.add("X", CHANNEL, d.X, deps=(f,), tie=(dev, mb), **common)
        x_of[(i, r)] = x
        prev = x
        if d.AF > 0:
            prev = g.add("AF", SERVER, d.AF, deps=(prev,), rank=_server_rank("AF", mode), tie=(mb,), **common)
        prev = g.add("SF", SERVER, d.SF, deps=(prev,), rank=_server_rank("SF", mode), tie=(mb,), **common)
        prev = g.add("B", SERVER, d.B, deps=(prev,), rank=_server_rank("B", mode), tie=(mb,), **common)
        g.add("W", SERVER, d.W, deps=(prev,), rank=_server_rank("W", mode), tie=(mb,), **common)
    events = run(g, chain=(mode == "sequential"))
    return PipelineSchedule(events, scheme="splitfrozen", mode=mode,
                            meta={"depths": list(depths), "num_microbatches": num_microbatches,
                                  "device_buffer": device_buffer})


# ---------------------------------------------------------------------------
# baselines

def _aggregate_time(cluster: ClusterSpec, layers: int) -> float:
    # one multiply and one add per parameter per device
    n = cm.adapter_param_count(cluster.model, cluster.workload, layers)
    return cm.stage_time(2.0 * n * len(cluster.devices), cluster.server_capacity)


def _add_sync(g: TaskGraph, cluster: ClusterSpec, r: int, uploads_after: dict[int, int],
              layers: int) -> dict[int, int]:
    """Adapter upload per device, server aggregation, adapter download per device."""
    m, w = cluster.model, cluster.workload
    xs = cm.xmit_time(cm.adapter_bytes(m, w, layers), cluster.channel)
    ups = []
    for i, after in sorted(uploads_after.items()):
        dev = cluster.devices[i].device_id
        ups.append(g.add("X", CHANNEL, xs, deps=(after,), device=dev, round=r, tie=(dev, -1)))
    s = g.add("Sync", SERVER, _aggregate_time(cluster, layers), deps=ups, round=r,
              rank=_SERVER_RANK["Sync"])
    downs = {}
    for i in sorted(uploads_after):
        dev = cluster.devices[i].device_id
        downs[i] = g.add("X", CHANNEL, xs, deps=(s,), device=dev, round=r, tie=(dev, -1))
    return downs


def _rounds(num_microbatches: int, D: int) -> int:
    return math.ceil(num_microbatches / D)


def _fedlora(cluster: ClusterSpec, num_microbatches: int) -> TaskGraph:
    m, w = cluster.model, cluster.workload
    N = m.num_layers
    D = len(cluster.devices)
    b, wt = cm.lora_backward_flops(m, w, N)
    g = TaskGraph()
    gate: dict[int, int] = {}
    for r in range(_rounds(num_microbatches, D)):
        last = {}
        for i in range(D):
            mb = r * D + i
            if mb >= num_microbatches:
                break
            dev = cluster.devices[i].device_id
            cap = cluster.device_capacity(i)
            res = device_resource(dev)
            common = dict(microbatch=mb, device=dev, round=r, tie=(mb,))
            f = g.add("F", res, cm.stage_time(cm.lora_forward_flops(m, w, N), cap), deps=(gate.get(i),), **common)
            bb = g.add("B", res, cm.stage_time(b, cap), deps=(f,), **common)
            last[i] = g.add("W", res, cm.stage_time(wt, cap), deps=(bb,), **common)
        gate = _add_sync(g, cluster, r, last, N)
    return g


def _splitlora(cluster: ClusterSpec, num_microbatches: int, mode: str) -> TaskGraph:
    m, w = cluster.model, cluster.workload
    c = cluster.splitlora_cut
    top = m.num_layers - c
    D = len(cluster.devices)
    S = cluster.server_capacity
    x = cm.xmit_time(cm.activation_bytes(m, w), cluster.channel)
    db, dw = cm.lora_backward_flops(m, w, c)
    sb, sw = cm.lora_backward_flops(m, w, top)
    g = TaskGraph()
    gate: dict[int, int] = {}
    for r in range(_rounds(num_microbatches, D)):
        last = {}
        for i in range(D):
            mb = r * D + i
            if mb >= num_microbatches:
                break
            dev = cluster.devices[i].device_id
            cap = cluster.device_capacity(i)
            res = device_resource(dev)
            common = dict(microbatch=mb, device=dev, round=r)
            f = g.add("F", res, cm.stage_time(cm.lora_forward_flops(m, w, c), cap),
                      deps=(gate.get(i),), tie=(mb,), **common)
            up = g.add("X", CHANNEL, x, deps=(f,), tie=(dev, mb), **common)
            sf = g.add("SF", SERVER, cm.stage_time(cm.lora_forward_flops(m, w, top), S), deps=(up,),
                       rank=_server_rank("SF", mode), tie=(mb,), **common)
            bs = g.add("B", SERVER, cm.stage_time(sb, S), deps=(sf,), rank=_server_rank("B", mode),
                       tie=(mb,), **common)
            g.add("W", SERVER, cm.stage_time(sw, S), deps=(bs,), rank=_server_rank("W", mode),
                  tie=(mb,), **common)
            down = g.add("X", CHANNEL, x, deps=(bs,), tie=(dev, mb), **common)
            bd = g.add("B", res, cm.stage_time(db, cap), deps=(down,), tie=(mb,), **common)
            last[i] = g.add("W", res, cm.stage_time(dw, cap), deps=(bd,), tie=(mb,), **common)
        gate = _add_sync(g, cluster, r, last, c)
    return g


def _cenlora(cluster: ClusterSpec, num_microbatches: int, mode: str) -> TaskGraph:
    m, w = cluster.model, cluster.workload
    N = m.num_layers
    S = cluster.server_capacity
    b, wt = cm.lora_backward_flops(m, w, N)
    g = TaskGraph()
    for mb in range(num_microbatches):
        common = dict(microbatch=mb, round=mb // len(cluster.devices), tie=(mb,))
        f = g.add("F", SERVER, cm.stage_time(cm.lora_forward_flops(m, w, N), S),
                  rank=_server_rank("F", mode), **common)
        bb = g.add("B", SERVER, cm.stage_time(b, S), deps=(f,), rank=_server_rank("B", mode), **common)
        g.add("W", SERVER, cm.stage_time(wt, S), deps=(bb,), rank=_server_rank("W", mode), **common)
    return g


# ---------------------------------------------------------------------------
# results

@dataclass
class SimulationResult:
    scheme: str
    schedule: PipelineSchedule
    device_flops_per_sample: float
    device_time: float
    total_time: float
    channel_bytes_per_round: float
    depths: list[int] = field(default_factory=list)


def _device_time(s: PipelineSchedule) -> float:
    evs = [e for e in s.events if e.device >= 0 and e.resource != SERVER]
    if not evs:
        return 0.0
    return max(e.end for e in evs) - min(e.start for e in s.events)


def device_flops_per_sample(cluster: ClusterSpec, scheme: str, depths: list[int] | None = None) -> float:
    m, w = cluster.model, cluster.workload.per_sample()
    if scheme == "splitfrozen":
        depths = allocate_layers(cluster) if depths is None else depths
        return sum(cm.frozen_forward_flops(m, w, L) for L in depths) / len(depths)
    if scheme in ("fedlora", "cenlora"):
        return cm.lora_finetune_flops(m, w, m.num_layers)
    if scheme == "splitlora":
        return cm.lora_finetune_flops(m, w, cluster.splitlora_cut)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def simulate_baseline(cluster: ClusterSpec, scheme: str, num_microbatches: int,
                      mode: str = "pipelined") -> SimulationResult:
    if scheme not in BASELINES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {BASELINES}")
    if mode not in ("pipelined", "fused"):
        raise ValueError(f"baselines support modes 'pipelined' and 'fused', not {mode!r}")
    m, w = cluster.model, cluster.workload
    D = len(cluster.devices)
    if scheme == "fedlora":
        g = _fedlora(cluster, num_microbatches)
        bytes_round = 2 * cm.adapter_bytes(m, w, m.num_layers) * D
    elif scheme == "splitlora":
        g = _splitlora(cluster, num_microbatches, mode)
        bytes_round = 2 * D * cm.activation_bytes(m, w) + 2 * cm.adapter_bytes(m, w, cluster.splitlora_cut) * D
    else:
        g = _cenlora(cluster, num_microbatches, mode)
        bytes_round = 0.0
    sched = PipelineSchedule(run(g), scheme=scheme, mode=mode,
                             meta={"num_microbatches": num_microbatches})
    if scheme == "cenlora":
        # Device time for the centralized reference: one device's share of the
        # epoch fine-tuned end to end on the least capable device.
        share = _rounds(num_microbatches, D)
        slowest = min(cluster.device_capacity(i) for i in range(D))
        dtime = share * cm.stage_time(cm.lora_finetune_flops(m, w, m.num_layers), slowest)
    else:
        dtime = _device_time(sched)
    return SimulationResult(scheme, sched, device_flops_per_sample(cluster, scheme), dtime,
                            sched.makespan, bytes_round)


def simulate_scheme(cluster: ClusterSpec, scheme: str, num_microbatches: int,
                    depths: list[int] | None = None, mode: str = "pipelined",
                    device_buffer: int = 1) -> SimulationResult:
    if scheme != "splitfrozen":
        return simulate_baseline(cluster, scheme, num_microbatches, mode)
    depths = allocate_layers(cluster) if depths is None else list(depths)
    sched = simulate_splitfrozen(cluster, depths, num_microbatches, mode, device_buffer)
    bytes_round = len(depths) * cm.activation_bytes(cluster.model, cluster.workload)
    return SimulationResult("splitfrozen", sched, device_flops_per_sample(cluster, scheme, depths),
                            _device_time(sched), sched.makespan, bytes_round, depths)
