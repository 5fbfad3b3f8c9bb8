"""Command-line entry point: ``fewshot-vad <subcommand> [options]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
failures while running a stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .errors import FewShotVADError, ValidationError
from .pipeline import (merge_reports, record_config, run_lock, stage_adapt, stage_eval, stage_metatrain,
                       stage_pretrain)
from .synth import default_specs, generate_synthetic_corpus

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", type=Path, help="run configuration file (key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key; may be repeated")
    p.add_argument("--out", type=Path, required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-vad", description="Few-shot scene-adaptive anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("pretrain", help="adversarially pre-train the frame predictor"))

    p = sub.add_parser("metatrain", help="meta-train from the pre-trained checkpoint")
    _add_common(p)
    p.add_argument("--N", type=int, default=None, help="tasks per iteration (default: config N)")

    p = sub.add_parser("adapt", help="adapt to a meta-test scene from its first K windows")
    _add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--method", default="ours")

    _add_common(sub.add_parser("eval", help="evaluate every (method, K, scene) cell"))

    p = sub.add_parser("synth-gen", help="render a synthetic scene corpus")
    p.add_argument("--scenes", type=int, default=None, help="number of scenes (default: config synth_scenes)")
    p.add_argument("--config", type=Path)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", type=Path, required=True, help="corpus directory")

    p = sub.add_parser("report", help="merge evaluation records of several runs")
    p.add_argument("runs", nargs="+", type=Path, help="run directories")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    return parser


def _load_config(args) -> config_mod.RunConfig:
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
        return cfg.with_overrides(config_mod.parse_overrides(args.overrides))
    except (ValidationError, TypeError) as err:
        raise _UsageError(str(err)) from err


def _run(args) -> str:
    if args.command == "report":
        return str(merge_reports(args.runs, args.out))
    cfg = _load_config(args)
    if args.command == "synth-gen":
        n = cfg.synth_scenes if args.scenes is None else args.scenes
        if n < 1:
            raise _UsageError("--scenes must be >= 1")
        specs = default_specs(n, cfg.seed, cfg.frame_size, cfg.synth_video_length, cfg.synth_train_videos,
                              cfg.synth_test_videos, n_sprites=cfg.synth_sprites)
        return str(generate_synthetic_corpus(specs, args.out))
    with run_lock(args.out):
        record_config(cfg, args.out)
        if args.command == "pretrain":
            return str(stage_pretrain(cfg, args.out))
        if args.command == "metatrain":
            return str(stage_metatrain(cfg, args.out, args.N))
        if args.command == "adapt":
            return str(stage_adapt(cfg, args.out, args.scene, args.K, args.method))
        return str(stage_eval(cfg, args.out))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(_run(args))
    except _UsageError as err:
        print(f"fewshot-vad {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FewShotVADError as err:
        print(f"fewshot-vad {args.command}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
