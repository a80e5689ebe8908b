"""Schedule serialisation: JSON event lists and self-contained SVG Gantt charts."""

from __future__ import annotations

import json
from xml.sax.saxutils import escape

from .model import PipelineSchedule, ScheduleEvent

SCHEDULE_FORMAT = "splitfrozen.schedule"
SCHEDULE_VERSION = 1

KIND_COLORS = {
    "F": "#4e79a7", "X": "#f28e2b", "AF": "#edc948", "SF": "#59a14f",
    "B": "#e15759", "W": "#b07aa1", "Sync": "#9c755f",
}
_FIELDS = ("kind", "resource", "microbatch", "start", "duration", "device", "round", "deps")


def schedule_to_dict(s: PipelineSchedule) -> dict:
    return {
        "format": SCHEDULE_FORMAT,
        "version": SCHEDULE_VERSION,
        "scheme": s.scheme,
        "mode": s.mode,
        "time_unit": "simulated seconds",
        "meta": s.meta,
        "makespan": s.makespan,
        "bubble_time": s.bubble_time,
        "events": [{f: (list(getattr(e, f)) if f == "deps" else getattr(e, f)) for f in _FIELDS}
                   for e in s.events],
    }


def schedule_from_dict(d: dict) -> PipelineSchedule:
    if d.get("format") != SCHEDULE_FORMAT:
        raise ValueError("not a schedule document")
    if d.get("version") != SCHEDULE_VERSION:
        raise ValueError(f"unsupported schedule version {d.get('version')}")
    events = [ScheduleEvent(e["kind"], e["resource"], int(e["microbatch"]), float(e["start"]),
                            float(e["duration"]), int(e.get("device", -1)), int(e.get("round", 0)),
                            tuple(e.get("deps", ()))) for e in d["events"]]
    return PipelineSchedule(events, scheme=d.get("scheme", "splitfrozen"), mode=d.get("mode", "pipelined"),
                            meta=d.get("meta", {}))


def dumps(s: PipelineSchedule) -> str:
    return json.dumps(schedule_to_dict(s), indent=1, sort_keys=True) + "\n"


def loads(text: str) -> PipelineSchedule:
    return schedule_from_dict(json.loads(text))


def _fmt(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".") or "0"


def gantt_svg(s: PipelineSchedule, width: int = 1200, lane_height: int = 22, title: str | None = None) -> str:
    """One lane per resource, one rectangle per event, coloured by kind."""
    lanes = s.resources()
    label_w, top, pad = 90, 40, 4
    plot_w = width - label_w - 20
    t0 = min((e.start for e in s.events), default=0.0)
    span = s.makespan or 1.0
    scale = plot_w / span
    height = top + lane_height * len(lanes) + 50
    title = title or f"{s.scheme} ({s.mode}) makespan {s.makespan:.6g} s"
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{label_w}" y="20" font-size="13">{escape(title)}</text>',
    ]
    for li, lane in enumerate(lanes):
        y = top + li * lane_height
        out.append(f'<text x="4" y="{y + lane_height - 8}">{escape(lane)}</text>')
        out.append(f'<line x1="{label_w}" y1="{y + lane_height}" x2="{width - 20}" '
                   f'y2="{y + lane_height}" stroke="#dddddd"/>')
        for e in s.on(lane):
            x = label_w + (e.start - t0) * scale
            w = e.duration * scale
            out.append(
                f'<rect x="{_fmt(x)}" y="{y + pad}" width="{_fmt(w)}" height="{lane_height - 2 * pad}" '
                f'fill="{KIND_COLORS.get(e.kind, "#888888")}" stroke="#333333" stroke-width="0.3">'
                f'<title>{escape(e.label())} start={e.start!r} dur={e.duration!r}</title></rect>')
    ly = top + lane_height * len(lanes) + 20
    for k, (kind, color) in enumerate(KIND_COLORS.items()):
        x = label_w + 70 * k
        out.append(f'<rect x="{x}" y="{ly}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{x + 16}" y="{ly + 10}">{kind}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
