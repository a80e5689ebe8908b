"""Experiment runner: schedule simulations, toy training runs and reports.

Output layout under the output directory::

    report.csv                  one row per (scheme, mode, seed)
    report.json                 the same rows plus conventions, loss
                                trajectories and full schedule event lists
    schedules/<scheme>.json     schedule event list
    gantt/<scheme>.svg          Gantt chart
    manifests/<mode>_seed<s>.csv  shard manifest (device_id, sample_id)
    frames/<mode>_seed<s>.log   protocol frame log (only with ``record``)
    INCOMPLETE                  present only if the run failed

Everything is a deterministic function of the config and seeds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .. import rng
from ..costmodel import FLOP_CONVENTION
from ..datapart import manifest_csv, partition
from ..protocol.runner import run_splitfrozen
from ..scheduler import (SimulationResult, dumps, gantt_svg, schedule_to_dict, simulate_scheme,
                         validate_schedule)
from .config import ExperimentConfig
from .toyruns import centralized_train, fedlora_train, make_toy_dataset, splitlora_train

REPORT_SCHEMA_VERSION = 1
TIME_UNIT = "simulated seconds per epoch"
INCOMPLETE = "INCOMPLETE"
# Schemes whose makespan is compared against for the headline time reduction.
TIME_BASELINES = ("fedlora", "splitlora")
BASE_COLUMNS = ["scheme", "mode", "seed", "device_flops_per_sample", "device_time_s", "total_time_s",
                "final_loss"]


class RunError(RuntimeError):
    """An invariant was violated during an experiment run."""


@dataclass
class ExperimentReport:
    columns: list[str]
    rows: list[dict]
    simulations: dict[str, SimulationResult] = field(default_factory=dict)
    trajectories: dict[str, list[float]] = field(default_factory=dict)
    manifests: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def row(self, scheme: str, mode: str | None = None, seed: int | None = None) -> dict:
        for r in self.rows:
            if r["scheme"] == scheme and mode in (None, r["mode"]) and seed in (None, r["seed"]):
                return r
        raise KeyError((scheme, mode, seed))


def reduction(value: float, reference: float) -> float:
    return 1.0 - value / reference


def report_columns(schemes: list[str]) -> list[str]:
    cols = list(BASE_COLUMNS)
    for b in schemes:
        if b != "splitfrozen":
            cols += [f"device_flops_reduction_vs_{b}", f"total_time_reduction_vs_{b}"]
    if any(b in schemes for b in TIME_BASELINES):
        cols.append("total_time_reduction_vs_best_baseline")
    return cols


def add_ratios(rows: list[dict], schemes: list[str]) -> None:
    """Fill reduction columns from the raw columns of the reference rows."""
    sims = {}
    for r in rows:
        sims.setdefault(r["scheme"], r)
    for r in rows:
        for b in schemes:
            if b == "splitfrozen":
                continue
            ref = sims[b]
            r[f"device_flops_reduction_vs_{b}"] = reduction(r["device_flops_per_sample"],
                                                            ref["device_flops_per_sample"])
            r[f"total_time_reduction_vs_{b}"] = reduction(r["total_time_s"], ref["total_time_s"])
        best = [sims[b]["total_time_s"] for b in TIME_BASELINES if b in sims]
        if best:
            r["total_time_reduction_vs_best_baseline"] = reduction(r["total_time_s"], min(best))


def _seeds(seed: int) -> tuple[int, int]:
    """(shuffle seed, adapter-init seed) derived from a run seed."""
    return rng.derive_seed(seed, 1), rng.derive_seed(seed, 2)


def run_toy(cfg: ExperimentConfig, scheme: str, x, y, shards, depths, seed: int, record=None):
    t = cfg.toy
    shuffle_seed, lora_seed = _seeds(seed)
    tc = cfg.train_config(seed)
    common = dict(rounds=cfg.rounds, lora_rank=t.lora_rank, lora_seed=lora_seed)
    if scheme == "splitfrozen":
        res = run_splitfrozen(cfg.toy_config(), x, y, shards, depths, tc,
                              pooled_batch_size=t.pooled_batch_size, device_batch_size=t.device_batch_size,
                              shuffle_seed=shuffle_seed, shuffle_window=t.shuffle_window,
                              transport=t.transport, record=record, wire_dtype=cfg.wire_dtype, **common)
        if res.device_digest_before != res.device_digest_after:
            raise RunError("device prefix weights changed during training")
        return res.step_losses, res.round_losses
    if scheme == "cenlora":
        res = centralized_train(cfg.toy_config(), x, y, tc, pooled_batch_size=t.pooled_batch_size,
                                shuffle_seed=shuffle_seed, shuffle_window=t.shuffle_window,
                                scheme="cenlora", **common)
    elif scheme == "fedlora":
        res = fedlora_train(cfg.toy_config(), x, y, shards, tc, device_batch_size=t.device_batch_size,
                            shuffle_seed=shuffle_seed, **common)
    else:
        cut = min(cfg.cluster.splitlora_cut, t.model.depth - 1)
        res = splitlora_train(cfg.toy_config(), x, y, shards, tc, cut=cut,
                              device_batch_size=t.device_batch_size, shuffle_seed=shuffle_seed, **common)
    return res.step_losses, res.round_losses


def simulate_all(cfg: ExperimentConfig, schemes: list[str]) -> dict[str, SimulationResult]:
    cluster = cfg.cluster_spec()
    out = {}
    for s in schemes:
        res = simulate_scheme(cluster, s, cfg.num_microbatches, device_buffer=cfg.cluster.device_buffer)
        bad = validate_schedule(res.schedule)
        if bad:
            raise RunError(f"{s} schedule invalid: {bad[0]} (+{len(bad) - 1} more)")
        out[s] = res
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    buf.write(f"# splitfrozen report v{REPORT_SCHEMA_VERSION}; times: {TIME_UNIT}; "
              f"FLOPs: {FLOP_CONVENTION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report.columns)
    for r in report.rows:
        w.writerow([_fmt(r[c]) for c in report.columns])
    return buf.getvalue()


def read_report_csv(text: str) -> list[dict]:
    """Parse a report CSV back into typed rows (comment lines skipped)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        typed = {}
        for k, v in r.items():
            if k in ("scheme", "mode"):
                typed[k] = v
            elif k == "seed":
                typed[k] = int(v)
            else:
                typed[k] = float(v)
        rows.append(typed)
    return rows


def report_json(report: ExperimentReport) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "conventions": {"time_unit": TIME_UNIT, "flops": FLOP_CONVENTION,
                        "reduction": "1 - value / reference"},
        "meta": report.meta,
        "columns": report.columns,
        "rows": report.rows,
        "loss_trajectories": report.trajectories,
        "schedules": {s: schedule_to_dict(r.schedule) for s, r in report.simulations.items()},
    }
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"


def build_report(cfg: ExperimentConfig, record_dir: Path | None = None,
                 progress=None) -> ExperimentReport:
    schemes = sorted(cfg.schemes)
    columns = report_columns(schemes)
    if cfg.rounds == 0:
        return ExperimentReport(columns, [], meta={"name": cfg.name, "rounds": 0})
    sims = simulate_all(cfg, schemes)
    depths = sims["splitfrozen"].depths if "splitfrozen" in sims else cfg.toy_depths()
    x, y = make_toy_dataset(cfg.toy_config(), cfg.toy.num_samples, cfg.toy.data_seed, cfg.toy.noise)
    rows, trajectories, manifests = [], {}, {}
    for mode in sorted(cfg.modes, key=lambda m: m.label):
        for seed in sorted(cfg.seeds):
            shards = partition(y, cfg.partition_spec(mode, seed))
            manifests[f"{mode.label}_seed{seed}"] = manifest_csv(shards)
            for scheme in schemes:
                if progress:
                    progress(f"{scheme} {mode.label} seed={seed}")
                record = None
                if record_dir is not None and scheme == "splitfrozen":
                    record_dir.mkdir(parents=True, exist_ok=True)
                    record = open(record_dir / f"{mode.label}_seed{seed}.log", "wb")
                try:
                    steps, rounds = run_toy(cfg, scheme, x, y, shards, depths, seed, record)
                finally:
                    if record is not None:
                        record.close()
                if not all(math.isfinite(v) for v in steps):
                    raise RunError(f"{scheme} {mode.label} seed {seed}: non-finite loss")
                trajectories[f"{scheme}/{mode.label}/seed{seed}"] = steps
                sim = sims[scheme]
                rows.append({"scheme": scheme, "mode": mode.label, "seed": seed,
                             "device_flops_per_sample": sim.device_flops_per_sample,
                             "device_time_s": sim.device_time, "total_time_s": sim.total_time,
                             "final_loss": rounds[-1]})
    rows.sort(key=lambda r: (r["scheme"], r["mode"], r["seed"]))
    add_ratios(rows, schemes)
    cluster = cfg.cluster_spec()
    meta = {"name": cfg.name, "rounds": cfg.rounds, "depths": list(depths),
            "utilization": cluster.utilization, "num_microbatches": cfg.num_microbatches,
            "channel_bytes_per_round": {s: r.channel_bytes_per_round for s, r in sims.items()}}
    return ExperimentReport(columns, rows, sims, trajectories, manifests, meta)


def check_ratios(rows: list[dict], tol: float = 1e-9) -> list[str]:
    """Recompute every reduction column from the raw columns."""
    fresh = [{k: v for k, v in r.items() if "_reduction_vs_" not in k} for r in rows]
    schemes = sorted({r["scheme"] for r in rows})
    if not fresh:
        return []
    add_ratios(fresh, schemes)
    bad = []
    for old, new in zip(rows, fresh):
        for k, v in new.items():
            if "_reduction_vs_" in k and abs(old[k] - v) > tol:
                bad.append(f"{old['scheme']}/{old['mode']}/{old['seed']} {k}: {old[k]} != {v}")
    return bad


def write_schedules(out: Path, sims: dict[str, SimulationResult]) -> None:
    (out / "schedules").mkdir(parents=True, exist_ok=True)
    (out / "gantt").mkdir(parents=True, exist_ok=True)
    for s, r in sims.items():
        (out / "schedules" / f"{s}.json").write_text(dumps(r.schedule))
        (out / "gantt" / f"{s}.svg").write_text(gantt_svg(r.schedule))


def write_manifests(out: Path, manifests: dict[str, str]) -> None:
    (out / "manifests").mkdir(parents=True, exist_ok=True)
    for name, text in manifests.items():
        (out / "manifests" / f"{name}.csv").write_text(text)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, record: bool = False,
                   progress=None) -> ExperimentReport:
    """Run every (scheme, mode, seed) cell and write the report files.

    On failure an ``INCOMPLETE`` marker holding the error is left in the
    output directory and the exception propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text("run in progress\n")
    try:
        report = build_report(cfg, out / "frames" if record else None, progress)
        bad = check_ratios(report.rows)
        if bad:
            raise RunError(f"ratio columns inconsistent: {bad[0]}")
        write_schedules(out, report.simulations)
        write_manifests(out, report.manifests)
        (out / "report.csv").write_text(report_csv(report))
        (out / "report.json").write_text(report_json(report))
    except BaseException as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    marker.unlink()
    return report


def run_partition(cfg: ExperimentConfig, out_dir: str | Path) -> dict[str, str]:
    out = Path(out_dir)
    _, y = make_toy_dataset(cfg.toy_config(), cfg.toy.num_samples, cfg.toy.data_seed, cfg.toy.noise)
    manifests = {f"{m.label}_seed{s}": manifest_csv(partition(y, cfg.partition_spec(m, s)))
                 for m in cfg.modes for s in cfg.seeds}
    write_manifests(out, manifests)
    return manifests


def simulation_summary(sims: dict[str, SimulationResult]) -> list[dict]:
    rows = [{"scheme": s, "mode": "-", "seed": 0, "device_flops_per_sample": r.device_flops_per_sample,
             "device_time_s": r.device_time, "total_time_s": r.total_time, "final_loss": float("nan")}
            for s, r in sorted(sims.items())]
    add_ratios(rows, sorted(sims))
    return rows


def run_simulate(cfg: ExperimentConfig, out_dir: str | Path) -> dict[str, SimulationResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sims = simulate_all(cfg, sorted(cfg.schemes))
    write_schedules(out, sims)
    rep = ExperimentReport(report_columns(sorted(cfg.schemes)), simulation_summary(sims))
    (out / "simulation.csv").write_text(report_csv(rep))
    return sims


__all__ = [
    "ExperimentReport", "INCOMPLETE", "RunError", "TIME_BASELINES", "add_ratios", "build_report",
    "check_ratios", "read_report_csv", "reduction", "report_csv", "report_json", "run_experiment",
    "run_partition", "run_simulate", "run_toy", "simulate_all",
]
