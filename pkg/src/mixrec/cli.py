"""Command-line entry point: one subcommand per pipeline stage plus evaluate/ablate/infer.

Exit codes: 0 success, 2 configuration error, 3 prerequisite error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .collab import DivergenceError
from .config import ConfigError, PipelineConfig, load_config, synthetic_preset
from .data import DataError
from . import pipeline

EXIT_CONFIG, EXIT_PREREQ, EXIT_DIVERGED = 2, 3, 4

STAGE_COMMANDS = ("prepare", "synth", "train-collab", "train-global", "cluster", "train-experts",
                  "train-projector")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data], [lm], [mix], ... sections")
    p.add_argument("--preset", choices=("default", "synthetic"), default="default",
                   help="starting values before the config file and flags are applied")
    p.add_argument("--output", dest="pipeline.output", metavar="DIR", help="output directory")
    g = p.add_argument_group("config keys (override the file)")
    for name, sec in PipelineConfig().sections().items():
        for f in dataclasses.fields(sec):
            g.add_argument(f"--{name}.{f.name}", dest=f"{name}.{f.name}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixrec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        _add_config_flags(sub.add_parser(name, help=f"run the {name} stage"))
    ev = sub.add_parser("evaluate", help="score the test split and write report files")
    _add_config_flags(ev)
    ev.add_argument("--mode", choices=pipeline.MODES, default=None)
    _add_config_flags(sub.add_parser("ablate", help="full / no-think / no-experts / neither table"))
    run = sub.add_parser("run", help="run every missing stage, then evaluate")
    _add_config_flags(run)
    run.add_argument("--mode", choices=pipeline.MODES, default=None)
    inf = sub.add_parser("infer", help="score one (user, item) pair")
    _add_config_flags(inf)
    inf.add_argument("--user", type=int, required=True, help="dense user id of the processed dataset")
    inf.add_argument("--item", type=int, required=True, help="dense item id of the processed dataset")
    inf.add_argument("--mode", choices=pipeline.MODES, default=None)
    inf.add_argument("--explain", action="store_true", help="also generate a reason")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    if args.preset == "synthetic":
        cfg = synthetic_preset()
        if args.config:
            file_cfg = load_config(args.config)
            defaults = PipelineConfig()
            # file values that differ from plain defaults win over the preset
            for name, sec in file_cfg.sections().items():
                for f in dataclasses.fields(sec):
                    v = getattr(sec, f.name)
                    if v != getattr(getattr(defaults, name), f.name):
                        setattr(getattr(cfg, name), f.name, v)
            if file_cfg.output != defaults.output:
                cfg.output = file_cfg.output
        for k, v in overrides.items():
            cfg.set(k, v)
        return cfg
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd in STAGE_COMMANDS:
            result = pipeline.run_stage(cfg, cmd)
            print(json.dumps(result, sort_keys=True) if isinstance(result, dict) else f"sha256 {result}")
        elif cmd in ("evaluate", "run"):
            if cmd == "run":
                pipeline.ensure_stages(cfg, args.mode or cfg.eval.mode)
            print(pipeline.cmd_evaluate(cfg, args.mode).table())
        elif cmd == "ablate":
            rows = pipeline.cmd_ablate(cfg)
            print(pipeline.ablation_table(rows, cfg.eval.k), end="")
        elif cmd == "infer":
            print(json.dumps(pipeline.cmd_infer(cfg, args.user, args.item, args.mode, args.explain),
                             sort_keys=True))
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
