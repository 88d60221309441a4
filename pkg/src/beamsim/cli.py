"""Command-line experiment runner.

Subcommands mirror the pipeline stages: ``simulate``, ``beamform`` and
``evaluate`` operate on one scenario directory at a time, ``run`` does the
whole sweep, ``sweep-report`` joins finished scenarios.  Exit codes:
0 success, 1 configuration error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from beamsim import experiment
from beamsim.errors import BeamsimError, ConfigError


class _Parser(argparse.ArgumentParser):
    # config/usage mistakes exit 1, matching the documented codes
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser, speeds: bool = True) -> None:
    p.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    if speeds:
        p.add_argument("--speeds", type=str, default=None,
                       help="comma-separated speeds in rev/s (default 0,0.05,0.1,0.2,0.4)")
    p.add_argument("--overwrite", action="store_true",
                   help="replace existing scenario artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beamsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in (
        ("simulate", "render the recordings for each speed"),
        ("beamform", "run MVDR+CW on simulated scenario directories"),
        ("evaluate", "compute metric CSVs for processed scenarios"),
        ("run", "simulate, beamform and evaluate in one go"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        if name == "run":
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel scenario workers")

    p = sub.add_parser("sweep-report", help="join finished scenarios into one CSV")
    p.add_argument("dirs", nargs="+", type=Path, help="scenario directories")
    p.add_argument("--out", type=Path, required=True, help="combined CSV path")
    return parser


def _load_config(args) -> experiment.ExperimentConfig:
    if args.config is not None:
        cfg = experiment.load_config(args.config)
    else:
        cfg = experiment.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, scene=dataclasses.replace(cfg.scene,
                                                                 master_seed=args.seed))
    if getattr(args, "speeds", None):
        try:
            speeds = tuple(float(s) for s in args.speeds.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --speeds list: {exc}") from exc
        import dataclasses

        cfg = dataclasses.replace(cfg, speeds_rev_s=speeds)
    return cfg.validate()


def _scenario_dirs(cfg, out_root: Path):
    return [(speed, Path(out_root) / experiment.scenario_label(speed))
            for speed in cfg.speeds_rev_s]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 1
    except (BeamsimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "sweep-report":
        summary = experiment.sweep_report(args.dirs, args.out)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0

    cfg = _load_config(args)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    if args.command == "run":
        dirs = experiment.run_all(cfg, out_root, overwrite=args.overwrite,
                                  jobs=max(1, args.jobs))
        experiment.sweep_report(dirs, out_root / "sweep_combined.csv")
        for d in dirs:
            print(d)
        return 0

    for speed, out_dir in _scenario_dirs(cfg, out_root):
        if args.command == "simulate":
            if out_dir.exists() and any(out_dir.iterdir()) and not args.overwrite:
                raise BeamsimError(
                    f"scenario directory {out_dir} already has artifacts (use --overwrite)"
                )
            experiment.simulate_scenario(cfg, speed, out_dir)
        elif args.command == "beamform":
            experiment.beamform_scenario(cfg, speed, out_dir)
        elif args.command == "evaluate":
            experiment.evaluate_scenario(cfg, speed, out_dir)
        print(out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
