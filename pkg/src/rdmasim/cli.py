"""Command-line entry point.

Exit status is 0 on success and 2 when the configuration (or a trace it
points at) does not validate.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Sequence

from . import config as cfgmod
from .harness import calibrate_window, format_table, summary_table, sweep
from .presets import PRESETS, preset
from .scenario import Scenario, make_trace, report_json, summary_line
from .workload import TraceFormatError, save_trace

EXIT_OK = 0
EXIT_INVALID = 2


def _load(args: argparse.Namespace) -> dict[str, Any]:
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        cfg = cfgmod.load(args.config)
    else:
        raise cfgmod.ConfigError("--config", "give --config <path> or --preset <name>")
    if getattr(args, "seed", None) is not None:
        cfg = cfgmod.resolve({**cfg, "seed": args.seed})
    return cfg


def _write(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    sc = Scenario(_load(args)).run()
    report = sc.report()
    _write(report_json(report), args.out)
    print(summary_line(report), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    axis = args.axis
    if axis not in cfgmod.SCHEMA:
        raise cfgmod.ConfigError(axis, "unknown sweep axis")
    values = [cfgmod.parse_value(axis, v) for v in args.values.split(",") if v != ""]
    reports = sweep(cfg, axis, values, args.jobs)
    rows = summary_table(reports, axis)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump({"axis": axis, "rows": rows, "reports": reports}, f, sort_keys=True, indent=2)
            f.write("\n")
    print(format_table(rows))
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    actors = [int(a) for a in args.actors.split(",")] if args.actors else list(range(1, 13))
    cal = calibrate_window(cfg, actors, args.jobs)
    print(format_table(cal.rows))
    if cal.warning:
        print(f"warning: {cal.warning}", file=sys.stderr)
    print(json.dumps({"window_bytes": cal.window_bytes, "peak_actors": cal.peak_actors, "interior_peak": cal.interior_peak}))
    return EXIT_OK


def cmd_gen_trace(args: argparse.Namespace) -> int:
    base: dict[str, Any] = {}
    if args.config:
        base = dict(cfgmod.load(args.config))
    kind = "kv" if args.preset in ("etc", "sys") else "burst"
    if kind == "burst" and not args.config:
        base = dict(PRESETS["fig2"])
    overrides: dict[str, Any] = {"workload.kind": kind, "workload.preset": args.preset}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.requests is not None:
        overrides["workload.requests"] = args.requests
    cfg = cfgmod.resolve({**base, **overrides})
    trace = make_trace(cfg)
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdmasim", description="RDMA batching / admission / polling simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp: argparse.ArgumentParser) -> None:
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="scenario JSON file")
        g.add_argument("--preset", choices=sorted(PRESETS), help="bundled scenario")

    r = sub.add_parser("run", help="run one scenario and emit its report")
    source(r)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="report path (default stdout)")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="run a scenario over several values of one key")
    source(s)
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma separated")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("calibrate-window", help="derive the admission window from an unregulated actor sweep")
    source(c)
    c.add_argument("--actors", help="comma separated actor counts (default 1..12)")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(fn=cmd_calibrate)

    g = sub.add_parser("gen-trace", help="write a synthetic trace file")
    g.add_argument("--preset", required=True, choices=("etc", "sys", "small", "medium", "large"))
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--requests", type=int)
    g.set_defaults(fn=cmd_gen_trace)

    sh = sub.add_parser("show-preset", help="print a bundled scenario as a config file")
    sh.add_argument("name", choices=sorted(PRESETS))
    sh.set_defaults(fn=lambda a: (print(json.dumps(PRESETS[a.name], sort_keys=True, indent=2)), EXIT_OK)[1])
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (cfgmod.ConfigError, TraceFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
