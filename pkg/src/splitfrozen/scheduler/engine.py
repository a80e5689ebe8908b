"""Non-preemptive, work-conserving list scheduler over named resources.

Each task names one resource, a duration, its predecessor tasks and a
priority. Whenever a resource is idle it starts the highest-priority task
whose predecessors have all finished; time then advances to the next
completion or readiness instant. Priority is ``(rank, ready_time, tie)``,
so equal-rank tasks are served in order of readiness with a deterministic
tie-break. The whole construction is single-threaded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ScheduleEvent


@dataclass
class Task:
    kind: str
    resource: str
    duration: float
    microbatch: int = -1
    device: int = -1
    round: int = 0
    deps: tuple[int, ...] = ()
    rank: int = 0
    tie: tuple = ()


class TaskGraph:
    def __init__(self):
        self.tasks: list[Task] = []

    def add(self, kind: str, resource: str, duration: float, *, deps=(), microbatch: int = -1,
            device: int = -1, round: int = 0, rank: int = 0, tie: tuple = ()) -> int:
        if duration < 0:
            raise ValueError(f"negative duration for {kind}")
        deps = tuple(sorted({d for d in deps if d is not None}))
        if any(d >= len(self.tasks) for d in deps):
            raise ValueError("dependencies must be added before their dependents")
        self.tasks.append(Task(kind, resource, float(duration), microbatch, device, round, deps, rank, tie))
        return len(self.tasks) - 1


def run(graph: TaskGraph, chain: bool = False) -> list[ScheduleEvent]:
    """Schedule every task; with ``chain`` each task also waits for its predecessor in list order."""
    tasks = graph.tasks
    n = len(tasks)
    deps = [set(t.deps) for t in tasks]
    if chain:
        for i in range(1, n):
            deps[i].add(i - 1)
    children: list[list[int]] = [[] for _ in range(n)]
    for i, ds in enumerate(deps):
        for d in ds:
            children[d].append(i)
    missing = [len(ds) for ds in deps]
    ready = [0.0] * n
    start = [0.0] * n
    end = [0.0] * n
    resources = sorted({t.resource for t in tasks})
    free_at = {r: 0.0 for r in resources}
    pending: dict[str, list[int]] = {r: [] for r in resources}
    for i in range(n):
        if missing[i] == 0:
            pending[tasks[i].resource].append(i)

    done = 0
    t = 0.0
    while done < n:
        progress = True
        while progress:
            progress = False
            for r in resources:
                if free_at[r] > t:
                    continue
                cands = [i for i in pending[r] if ready[i] <= t]
                if not cands:
                    continue
                i = min(cands, key=lambda k: (tasks[k].rank, ready[k], tasks[k].tie, k))
                pending[r].remove(i)
                start[i] = t
                end[i] = t + tasks[i].duration
                free_at[r] = end[i]
                done += 1
                progress = True
                for c in children[i]:
                    missing[c] -= 1
                    if missing[c] == 0:
                        ready[c] = max(end[d] for d in deps[c])
                        pending[tasks[c].resource].append(c)
        if done == n:
            break
        horizon = [v for v in free_at.values() if v > t]
        horizon += [ready[i] for p in pending.values() for i in p if ready[i] > t]
        if not horizon:
            raise RuntimeError("task graph has a dependency cycle")
        t = min(horizon)

    return [ScheduleEvent(tk.kind, tk.resource, tk.microbatch, start[i], tk.duration,
                          tk.device, tk.round, tuple(sorted(deps[i])))
            for i, tk in enumerate(tasks)]
