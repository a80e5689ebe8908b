from .engine import Task, TaskGraph, run
from .export import dumps, gantt_svg, loads, schedule_from_dict, schedule_to_dict
from .model import (CHAIN, CHANNEL, KINDS, SERVER, ClusterSpec, PipelineSchedule, ScheduleEvent,
                    device_resource)
from .simulate import (BASELINES, MODES, SCHEMES, AllocationError, SimulationResult,
                       StageDurations, allocate_layers, balanced_utilization, device_flops_per_sample,
                       device_stage_time, frozen_durations, simulate_baseline, simulate_scheme,
                       simulate_splitfrozen)
from .validate import validate_schedule

__all__ = [
    "AllocationError", "BASELINES", "CHAIN", "CHANNEL", "ClusterSpec", "KINDS", "MODES",
    "PipelineSchedule", "SCHEMES", "SERVER", "ScheduleEvent", "SimulationResult", "StageDurations",
    "Task", "TaskGraph", "allocate_layers", "balanced_utilization", "device_flops_per_sample",
    "device_resource", "device_stage_time", "dumps", "frozen_durations", "gantt_svg", "loads", "run",
    "schedule_from_dict", "schedule_to_dict", "simulate_baseline", "simulate_scheme",
    "simulate_splitfrozen", "validate_schedule",
]
