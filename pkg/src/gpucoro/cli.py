"""Command-line entry point: simulate, divergence-sweep, compare."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .determinism import divergence_sweep, write_sweep_csv
from .engine import fmt_time
from .errors import ConfigError, GpuCoroError, ParseError
from .policies import POLICIES
from .scenario import scenario_from_dict

log = logging.getLogger("gpucoro")


def _load(path, policy=None, seed=None):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if policy is not None and policy != cfg.get("policy"):
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}; valid: {', '.join(sorted(POLICIES))}")
        cfg["policy"] = policy
        cfg.pop("params", None)
    if seed is not None:
        cfg["seed"] = seed
    return scenario_from_dict(cfg, os.path.dirname(os.path.abspath(path)))


def _out_path(out, default_name):
    if out.endswith(os.sep) or os.path.isdir(out) or not os.path.splitext(out)[1]:
        os.makedirs(out, exist_ok=True)
        return os.path.join(out, default_name)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return out


def write_kernel_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vctx", "kernel", "phase", "grid", "dispatch", "start", "finish"])
        for r in sorted(report.kernels, key=lambda r: (r.start, r.vctx, r.kernel)):
            w.writerow([r.vctx, r.kernel, r.phase.value, r.grid, fmt_time(r.dispatch),
                        fmt_time(r.start), fmt_time(r.finish)])


def cmd_simulate(args):
    sc = _load(args.config, args.policy, args.seed)
    report, metrics = sc.evaluate()
    out = {"policy": sc.policy, "seed": sc.seed, "events": len(report.events),
           "clock": fmt_time(report.clock), "metrics": metrics.as_dict()}
    if args.log:
        report.write_event_log(args.log)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        path = _out_path(args.out, "metrics.json")
        with open(path, "w") as fh:
            fh.write(text + "\n")
        write_kernel_csv(report, os.path.splitext(path)[0] + "_kernels.csv")
        log.info("wrote %s", path)
    print(text)
    return 0


def cmd_sweep(args):
    try:
        splits = [int(s) for s in args.splits.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--splits must be comma-separated integers, got {args.splits!r}")
    if not splits or min(splits) < 1 or max(splits) > args.n:
        raise ConfigError(f"splits must lie in [1, {args.n}]")
    rows = divergence_sweep(args.format, args.n, splits, args.seeds, base_g=args.base)
    if args.out:
        path = _out_path(args.out, "sweep.csv")
        write_sweep_csv(rows, path)
        log.info("wrote %d rows to %s", len(rows), path)
    else:
        write_sweep_csv(rows, sys.stdout)
    return 0


def cmd_compare(args):
    runs = {}
    for path in args.configs:
        sc = _load(path, seed=args.seed)
        sc.normalize = True
        _, metrics = sc.evaluate()
        label = os.path.splitext(os.path.basename(path))[0]
        if label in runs:
            label = path
        runs[label] = metrics.as_dict()
    out = {"runs": runs,
           "aggregate_normalized_throughput": {k: v["aggregate_normalized_throughput"]
                                               for k, v in runs.items()}}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        with open(_out_path(args.out, "compare.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="gpucoro", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="run one scenario config")
    p.add_argument("config")
    p.add_argument("--policy", help=f"override policy ({', '.join(sorted(POLICIES))})")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="write the event log (JSON Lines) here")
    p.add_argument("--out", help="metrics JSON file or directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("divergence-sweep", help="reduction divergence across split sizes")
    p.add_argument("--format", default="fp16", choices=["fp16", "bf16", "fp32"])
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--splits", default="1,2,4,8,16,32,64")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--base", type=int, default=1, help="reference split size")
    p.add_argument("--out", help="CSV file or directory (default: stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="paired report over scenario configs")
    p.add_argument("configs", nargs="+")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return 2
    except (ConfigError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GpuCoroError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
