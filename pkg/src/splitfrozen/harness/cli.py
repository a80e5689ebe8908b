"""Command line interface.

    splitfrozen run <config> [--seed N] [--out DIR] [--scheme S ...] [--record]
    splitfrozen simulate <config> [--out DIR] [--scheme S ...]
    splitfrozen partition <config> [--seed N] [--out DIR]
    splitfrozen gantt <schedule.json> [--out FILE]
    splitfrozen validate <config>

``<config>`` is a YAML file or a preset name such as ``paper.gpt2``.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..scheduler import allocate_layers, gantt_svg, loads, validate_schedule
from ..scheduler.simulate import SCHEMES
from .config import ConfigError, ExperimentConfig, load_config
from .runner import run_experiment, run_partition, run_simulate

log = logging.getLogger("splitfrozen")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitfrozen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_cmd(name, help, seed=True, scheme=True, record=False):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config", help="YAML config file or preset name")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        if seed:
            sp.add_argument("--seed", type=int, help="run only this seed")
        if scheme:
            sp.add_argument("--scheme", action="append", choices=SCHEMES,
                            help="restrict to this scheme (repeatable)")
        if record:
            sp.add_argument("--record", action="store_true",
                            help="dump every protocol frame to frames/*.log")
        return sp

    config_cmd("run", "train, simulate and write reports", record=True)
    config_cmd("simulate", "schedule simulations only", seed=False)
    config_cmd("partition", "write shard manifests only", scheme=False)
    g = sub.add_parser("gantt", help="re-render a schedule JSON as SVG")
    g.add_argument("schedule", help="schedule JSON written by run/simulate")
    g.add_argument("--out", help="SVG path (default: alongside the JSON)")
    v = sub.add_parser("validate", help="check a config and print its derived setup")
    v.add_argument("config", help="YAML config file or preset name")
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    update = {}
    if getattr(args, "seed", None) is not None:
        update["seeds"] = [args.seed]
    if getattr(args, "scheme", None):
        update["schemes"] = list(dict.fromkeys(args.scheme))
    return cfg.model_copy(update=update) if update else cfg


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    cluster = cfg.cluster_spec()
    print(f"{args.config}: ok (schema v{cfg.schema_version}, {len(cluster.devices)} devices, "
          f"utilization {cluster.utilization:.6g}, depths {allocate_layers(cluster)}, "
          f"{cfg.num_microbatches} microbatches per epoch)")
    return EXIT_OK


def _cmd_gantt(args) -> int:
    src = Path(args.schedule)
    sched = loads(src.read_text())
    bad = validate_schedule(sched)
    if bad:
        raise RuntimeError(f"schedule invalid: {bad[0]}")
    dst = Path(args.out) if args.out else src.with_suffix(".svg")
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text(gantt_svg(sched))
    print(dst)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "gantt":
            return _cmd_gantt(args)
        cfg = _apply_overrides(load_config(args.config), args)
        out = args.out or cfg.output_dir
        if args.command == "run":
            report = run_experiment(cfg, out, record=args.record, progress=log.info)
            print(f"wrote {len(report.rows)} report rows to {out}")
        elif args.command == "simulate":
            sims = run_simulate(cfg, out)
            for s, r in sorted(sims.items()):
                print(f"{s}: total {r.total_time:.6g} s, device {r.device_time:.6g} s, "
                      f"{r.device_flops_per_sample / 1e6:.6g} MFLOP/sample")
        elif args.command == "partition":
            names = run_partition(cfg, out)
            print(f"wrote {len(names)} manifests to {Path(out) / 'manifests'}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report and exit non-zero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
