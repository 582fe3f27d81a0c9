"""Command-line experiment runner.

Subcommands map one-to-one onto pipeline stages:

    phonetemp synth             --config cfg.json
    phonetemp train-estimators  --config cfg.json
    phonetemp train-cbts        --config cfg.json
    phonetemp truthinf-bench    --config cfg.json
    phonetemp gen-labels        --config cfg.json
    phonetemp fewshot           --config cfg.json
    phonetemp fed               --config cfg.json
    phonetemp report            --config cfg.json

`--seed` and `--out` override the config file; `--deterministic` pins the
numeric libraries to one thread so reruns are byte-identical (the pipeline
itself is single-threaded by construction). Exit code 0 on success, 1 with a
stage-identified message otherwise.
"""

from __future__ import annotations

import argparse
import os
import sys

_STAGES = (
    "synth",
    "train-estimators",
    "train-cbts",
    "truthinf-bench",
    "gen-labels",
    "fewshot",
    "fed",
    "report",
)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phonetemp",
        description="Phone-based distributed ambient temperature measurement experiments",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in _STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="JSON experiment config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="force single-threaded numerics for byte-exact reruns",
        )
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
    # imported after the thread pinning so the env vars take effect
    from .config import load_config
    from .experiments import StageError, run_stage

    try:
        overrides = {"seed": args.seed, "out_dir": args.out}
        config = load_config(args.config, overrides)
        report = run_stage(args.stage, config)
    except StageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface with the stage name
        print(f"stage {args.stage}: {exc}", file=sys.stderr)
        return 1

    print(f"stage {report.stage}: ok (config {report.checksum})")
    for name, path in report.tables.items():
        print(f"  {name}: {path}")
    for key, value in report.scalars.items():
        print(f"  {key} = {value:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
