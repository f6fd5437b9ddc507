"""Command line entry point.

One subcommand per pipeline stage plus `pipeline` to run them all. Every
command loads the JSON config (default configs/pipeline.json, falling back
to built-in defaults when that file is absent), applies flag overrides, runs
the stage, and prints a JSON summary to stdout. Exit codes: 0 on success,
2 on usage errors, 1 when a stage fails; a missing input artifact fails
with a message naming its path.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import MissingArtifact, MusetraceError
from .pipeline import STAGES, _sanitize, load_config

DEFAULT_CONFIG = "configs/pipeline.json"

# (flag, dotted config key, parsed type)
_OVERRIDE_FLAGS = [
    ("--seed", "seed", int),
    ("--jobs", "jobs", int),
    ("--midi-dir", "paths.midi_dir", str),
    ("--work-dir", "paths.work_dir", str),
    ("--usage-log", "paths.usage_log", str),
    ("--epochs", "train.epochs", int),
    ("--learning-rate", "train.learning_rate", float),
    ("--num-targets", "generation.num_targets", int),
    ("--ensemble-size", "attribution.ensemble_size", int),
    ("--projection-dim", "attribution.projection_dim", int),
    ("--num-subsets", "evaluation.num_subsets", int),
    ("--subset-fraction", "evaluation.subset_fraction", float),
    ("--platform-cut", "royalty.platform_cut", float),
]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="musetrace",
        description="train-data attribution and royalty settlement for symbolic music",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="PATH",
                        help=f"JSON config file (default {DEFAULT_CONFIG})")
    for flag, dotted, kind in _OVERRIDE_FLAGS:
        common.add_argument(flag, dest=dotted.replace(".", "__"), type=kind,
                            default=None, help=f"override config key {dotted}")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in STAGES.items():
        doc = (fn.__doc__ or "").strip().splitlines()
        sub.add_parser(name, parents=[common],
                       help=doc[0] if doc else None)
    return parser


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for _, dotted, _ in _OVERRIDE_FLAGS:
        value = getattr(args, dotted.replace(".", "__"))
        if value is not None:
            overrides[dotted] = value
    return overrides


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        config_path = args.config
        if config_path is not None and not Path(config_path).exists():
            raise MissingArtifact(config_path, "config file named on the command line")
        if config_path is None and Path(DEFAULT_CONFIG).exists():
            config_path = DEFAULT_CONFIG
        cfg = load_config(config_path, _collect_overrides(args))
        summary = STAGES[args.command](cfg)
    except MusetraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(json.dumps(_sanitize(summary), sort_keys=True, indent=1))
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
