"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
inputs), 2 runtime failure (a ``diagnostics.txt`` is written to the output
root).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config, with_overrides

log = logging.getLogger("ractd")

COMMANDS = ("gen-data", "train-teacher", "train-reward", "distill", "eval", "bench", "ablate", "verify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ractd", description="Reward-aware consistency trajectory distillation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML or JSON experiment file (defaults when omitted)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help=f"output root (else ${pipeline.OUT_ENV}, else ./ractd_out)")
        if name in ("train-teacher", "train-reward", "distill"):
            s.add_argument("--steps", type=int)
        if name in ("distill", "eval", "bench", "ablate"):
            s.add_argument("--reward-weight", type=float)
            s.add_argument("--reward-ckpt", help="use this reward checkpoint instead of the stage output")
        if name in ("eval", "bench"):
            s.add_argument("--nfe", type=int)
            s.add_argument("--sampler", choices=("student", "heun", "ddpm", "ddim"))
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "reward_weight", None) is not None:
        over["distill"] = {"reward_weight": args.reward_weight}
    ev = {}
    if getattr(args, "nfe", None) is not None:
        ev["nfe"] = args.nfe
    if getattr(args, "sampler", None) is not None:
        ev["sampler"] = args.sampler
    if ev:
        over["eval"] = ev
    return with_overrides(cfg, **over) if over else cfg


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    root = pipeline.output_root(args.out)
    try:
        cfg = resolve_config(args)
        if args.command == "verify":
            from .verify import run_verify

            results = run_verify()
            for r in results:
                print(f"{'PASS' if r['ok'] else 'FAIL'} {r['name']}: {r['detail']}")
            if not all(r["ok"] for r in results):
                raise RuntimeError("verification failed: " + ", ".join(r["name"] for r in results if not r["ok"]))
            return 0
        reward_ckpt = getattr(args, "reward_ckpt", None)
        if reward_ckpt and not Path(reward_ckpt).exists():
            raise ConfigError([f"--reward-ckpt {reward_ckpt} does not exist"])
        layout = pipeline.Layout(cfg, root, reward_ckpt)
        result = pipeline.STAGES[args.command](cfg, layout, getattr(args, "steps", None))
        print(json.dumps(result, sort_keys=True, default=str))
        return 0
    except ConfigError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with diagnostics
        root.mkdir(parents=True, exist_ok=True)
        diag = root / "diagnostics.txt"
        diag.write_text(f"command: {argv if argv is not None else sys.argv[1:]}\n{traceback.format_exc()}")
        print(f"runtime failure: {exc} (see {diag})", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
