"""``forge`` command line.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 another process holds the output lock, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from filelock import FileLock, Timeout

from .config import ConfigError, PipelineConfig, load_config, save_config
from .pipeline import MissingPrerequisite, run_command
from .toydata import write_toy_dataset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_PREREQ, EXIT_LOCKED = 0, 1, 2, 3, 4

PHASES = ("pretrain-content", "pretrain-degradation", "train-ddpm", "generate", "ablate", "fig1a", "eval")

HELP = {
    "pretrain-content": "train E_cont and the HR decoder",
    "pretrain-degradation": "train E_deg and the LR decoder with E_cont frozen",
    "train-ddpm": "train the conditional denoiser",
    "generate": "synthesize and filter the paired LR dataset",
    "ablate": "sweep T caps or (n, margin) pairs through generate, SR train and eval",
    "fig1a": "matched vs mismatched degradation SR experiment",
    "eval": "train and score SR models on the generated and baseline datasets",
}

log = logging.getLogger("forge")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description="Decoupled content/degradation LR data generator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PHASES:
        sp = sub.add_parser(name, help=HELP[name])
        if name == "ablate":
            sp.add_argument("which", choices=["T", "n-margin"])
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tau-cap", type=int)
        sp.add_argument("--init", choices=["hr", "ref-lr"])
        sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    sp = sub.add_parser("toy-data", help="write a synthetic HR / real-LR / test dataset")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--n-hr", type=int, default=32)
    sp.add_argument("--n-lr", type=int, default=32)
    sp.add_argument("--n-test", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("init-config", help="write a default config file")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--profile", choices=["toy", "paper-scale-record"], default="toy")
    return p


def _apply_flags(cfg: PipelineConfig, args) -> PipelineConfig:
    gen = cfg.generation
    if args.tau_cap is not None:
        gen = replace(gen, tau_cap=args.tau_cap)
    if args.init is not None:
        gen = replace(gen, init=args.init)
    cfg = replace(cfg, generation=gen)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "toy-data":
        layout = write_toy_dataset(args.out, args.n_hr, args.n_lr, args.n_test, seed=args.seed)
        print(json.dumps(layout, indent=2))
        return EXIT_OK
    if args.command == "init-config":
        cfg = PipelineConfig.paper_scale_record() if args.profile == "paper-scale-record" else PipelineConfig()
        save_config(cfg, args.out)
        return EXIT_OK

    try:
        cfg = _apply_flags(load_config(args.config, seed=args.seed), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    kw = {}
    if args.command == "ablate":
        kw["which"] = args.which
    if args.stop_after is not None:
        kw["stop_after"] = args.stop_after
    try:
        with FileLock(str(out / ".forge.lock"), timeout=0):
            result = run_command(cfg, args.command, **kw)
    except Timeout:
        print(f"another forge process is writing to {out}", file=sys.stderr)
        return EXIT_LOCKED
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
