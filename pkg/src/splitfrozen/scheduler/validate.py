"""Structural checks on a schedule; an empty list means valid."""

from __future__ import annotations

from collections import defaultdict

from .model import CHAIN, KINDS, PipelineSchedule

# Absolute slack for float comparisons of event boundaries (seconds).
TIME_TOL = 1e-12


def _tol(*times: float) -> float:
    return TIME_TOL * max(1.0, *(abs(t) for t in times))


def validate_schedule(s: PipelineSchedule) -> list[str]:
    out: list[str] = []
    ev = s.events
    for k, e in enumerate(ev):
        if e.kind not in KINDS:
            out.append(f"event {k} {e.label()}: unknown kind {e.kind!r}")
        if not e.duration >= 0:
            out.append(f"event {k} {e.label()}: negative duration {e.duration}")
        if not e.start >= 0:
            out.append(f"event {k} {e.label()}: negative start {e.start}")

    # resource non-overlap: check every pair that overlaps, not just neighbours
    by_res = defaultdict(list)
    for k, e in enumerate(ev):
        by_res[e.resource].append(k)
    for r, idx in by_res.items():
        idx.sort(key=lambda k: (ev[k].start, ev[k].end, k))
        active: list[int] = []
        for k in idx:
            a = ev[k]
            active = [j for j in active if ev[j].end > a.start + _tol(ev[j].end, a.start)]
            if a.duration > 0:
                for j in active:
                    out.append(f"overlap on {r}: {ev[j].label()} [{ev[j].start:.9g}, {ev[j].end:.9g}) "
                               f"and {a.label()} [{a.start:.9g}, {a.end:.9g})")
                active.append(k)

    # explicit dependencies
    for k, e in enumerate(ev):
        for d in e.deps:
            if not 0 <= d < len(ev):
                out.append(f"event {k} {e.label()}: dangling dependency {d}")
            elif ev[d].end > e.start + _tol(ev[d].end, e.start):
                out.append(f"precedence: {e.label()} starts before {ev[d].label()} ends")

    # B before W on the same resource for the same microbatch
    groups = defaultdict(lambda: defaultdict(list))
    for e in ev:
        if e.microbatch >= 0:
            groups[(e.microbatch, e.resource)][e.kind].append(e)
    for (mb, r), kinds in groups.items():
        for w in kinds.get("W", []):
            bs = kinds.get("B", [])
            if not bs:
                out.append(f"{w.label()} has no B on {r}")
            elif any(b.end > w.start + _tol(b.end, w.start) for b in bs):
                out.append(f"{w.label()} starts before its B on {r} finishes")

    # canonical per-microbatch chain where each kind occurs once
    per_mb = defaultdict(list)
    for e in ev:
        if e.microbatch >= 0:
            per_mb[e.microbatch].append(e)
    for mb, es in per_mb.items():
        kinds = [e.kind for e in es]
        if len(set(kinds)) != len(kinds) or not set(kinds) <= set(CHAIN):
            continue
        ordered = sorted(es, key=lambda e: CHAIN.index(e.kind))
        for a, b in zip(ordered, ordered[1:]):
            if a.end > b.start + _tol(a.end, b.start):
                out.append(f"microbatch {mb}: {b.label()} starts before {a.label()} ends")
    return out
