"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure in at least one trial.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .filter import FilterError
from .io import DataError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "seeds", None) is not None:
        updates["seeds"] = args.seeds
    if getattr(args, "duration", None) is not None:
        updates["duration"] = args.duration
    if updates:
        # re-validate so overrides obey the same rules as file values
        data = cfg.model_dump(mode="json")
        data.update(updates)
        cfg = parse_config(data)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load(args)
    trial = harness.run_simulate(cfg, Path(args.out))
    print(f"wrote {len(trial.t)} samples x {trial.topology.imu_count} IMUs to {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    report = harness.run_track(cfg, Path(args.trial), out)
    print((out / "table.txt").read_text(), end="")
    rt = report.runtime
    print(f"runtime per step: mean {rt['mean_ms']:.3f} ms, median {rt['median_ms']:.3f} ms, "
          f"p95 {rt['p95_ms']:.3f} ms over {rt['steps']} steps")
    if report.not_converged:
        print(f"solver hit the iteration cap on {report.not_converged} steps")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    battery = harness.run_montecarlo(cfg, out)
    print((out / "table.txt").read_text(), end="")
    for f in battery.failures:
        step = f" at step {f['step']}" if f.get("step") is not None else ""
        print(f"seed {f['seed']} failed{step}: {f['error']}", file=sys.stderr)
    print(f"{len(battery.reports)}/{cfg.seeds} trials completed")
    if battery.failures:
        kinds = {f["kind"] for f in battery.failures}
        return EXIT_DATA if kinds == {"data"} else EXIT_NUMERICAL
    return EXIT_OK


def cmd_report(args) -> int:
    text = harness.run_report([Path(d) for d in args.dirs], Path(args.out) if args.out else None)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chaintrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=False):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--duration", type=float, help="override the trial length in seconds")
        if seeds:
            sp.add_argument("--seeds", type=int, help="number of Monte Carlo trials")

    sp = sub.add_parser("simulate", help="generate one trial")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("track", help="filter one trial directory")
    common(sp)
    sp.add_argument("--trial", required=True, help="directory written by 'simulate'")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("montecarlo", help="simulate and track many seeds")
    common(sp, seeds=True)
    sp.set_defaults(func=cmd_montecarlo)

    sp = sub.add_parser("report", help="compare result directories side by side")
    sp.add_argument("dirs", nargs="+")
    sp.add_argument("--out", help="write comparison.csv/.json/.txt here")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining value errors come from malformed inputs, e.g. shape checks
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
