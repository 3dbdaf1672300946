"""Command-line driver: ``hybrid-lora {probe,score,allocate,train,oracle,pipeline,report}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 missing
artifact, 3 invariant violated at runtime.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .allocator import DIRECTIONS
from .config import load_config
from .io import ArtifactMissing
from .model import ConfigError
from .trainer import InvariantViolation

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 1, 2, 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.total_steps=100 (repeatable)")
    p.add_argument("--out", help="output directory (overrides out_dir)")


def _config(args):
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-lora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe", help="pretrain the base checkpoint, attach LoRA everywhere, warm up")
    _add_config_args(p)
    p.add_argument("--overwrite", action="store_true", help="replace an existing probe checkpoint")

    p = sub.add_parser("score", help="sensitivity scores from the probed checkpoint")
    _add_config_args(p)
    p.add_argument("--probe", help="probed checkpoint (default: <out>/probe.ckpt)")

    p = sub.add_parser("allocate", help="split modules into FFT / LoRA under the budget")
    p.add_argument("--report", required=True, help="score report file")
    p.add_argument("--r-fft", type=float, default=0.10, help="FFT parameter budget ratio in (0, 1)")
    p.add_argument("--direction", choices=DIRECTIONS, default=DIRECTIONS[0])
    p.add_argument("--out", help="output directory (default: the report's directory)")

    p = sub.add_parser("train", help="hybrid final training from the base checkpoint and a plan")
    _add_config_args(p)
    p.add_argument("--m0", help="base checkpoint (default: <out>/m0.ckpt)")
    p.add_argument("--plan", help="plan file (default: <out>/plan.json)")

    p = sub.add_parser("oracle", help="per-module validation-loss perturbation scores")
    _add_config_args(p)
    p.add_argument("--probe", help="probed checkpoint (default: <out>/probe.ckpt)")

    p = sub.add_parser("pipeline", help="probe, score, allocate, train and oracle in sequence")
    _add_config_args(p)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("report", help="summarize an output directory")
    p.add_argument("out", help="output directory")
    return parser


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "allocate":
        report = Path(args.report)
        if not report.is_file():
            raise ArtifactMissing(f"report not found: {report}")
        if not 0.0 < args.r_fft < 1.0:
            raise ConfigError("r_fft", f"must lie in (0, 1), got {args.r_fft}")
        arts = pipeline.run_allocate(report, args.r_fft, args.direction, args.out or report.parent)
    elif cmd == "report":
        if not Path(args.out).is_dir():
            raise ArtifactMissing(f"output directory not found: {args.out}")
        print(pipeline.summarize(args.out))
        return
    else:
        cfg = _config(args)
        if cmd == "probe":
            arts = pipeline.run_probe(cfg, args.overwrite)
        elif cmd == "score":
            arts = pipeline.run_score(cfg, args.probe)
        elif cmd == "train":
            arts = pipeline.run_train(cfg, args.m0, args.plan)
        elif cmd == "oracle":
            arts = pipeline.run_oracle(cfg, args.probe)
        else:
            arts = pipeline.run_pipeline(cfg, args.overwrite)
    for name, digest in arts.items():
        print(f"{digest}  {name}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except (ConfigError, pipeline.OutputExists, pipeline.UniverseMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactMissing, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
