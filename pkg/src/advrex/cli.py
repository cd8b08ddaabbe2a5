"""Command line entry point: ``advrex {train,eval,attack,sweep,show-config}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod, experiment
from .checkpoint import CheckpointError
from .config import ConfigError


def _workers(args, cfg=None) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("ADVREX_WORKERS")
    if env:
        return max(1, int(env))
    return cfg.workers if cfg is not None else 1


def _betas(text: str) -> list[float]:
    try:
        return [float(b) for b in text.replace(" ", "").split(",") if b]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advrex", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, default=None,
                   help="evaluation worker processes (default: $ADVREX_WORKERS or config)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a defense")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--force", action="store_true", help="resume even if the config hash differs")

    e = sub.add_parser("eval", help="evaluate a checkpoint, writing an EvalReport CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))

    a = sub.add_parser("attack", help="run one domain against a checkpoint")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--domain", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="defaults to the config embedded in the checkpoint")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--restarts", type=int, default=None)
    a.add_argument("--limit", type=int, default=None)

    s = sub.add_parser("sweep", help="train across a grid of REx beta values")
    s.add_argument("--config", required=True)
    s.add_argument("--beta", required=True, type=_betas, help="e.g. 0,1,10,100")

    c = sub.add_parser("show-config", help="print a resolved config (or preset) as TOML")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "show-config":
            cfg = cfgmod.load(args.config) if args.config else cfgmod.preset(args.preset)
            sys.stdout.write(cfgmod.dumps(cfg))
        elif args.command == "train":
            cfg = cfgmod.load(args.config)
            res = experiment.train(cfg, resume=args.resume, force=args.force, workers=_workers(args, cfg))
            print(json.dumps({"out_dir": str(res.out_dir), "best_epoch": res.best_epoch}))
        elif args.command == "eval":
            cfg = cfgmod.load(args.config)
            rep = experiment.evaluate(cfg, args.ckpt, args.out, _workers(args, cfg), args.split)
            print(json.dumps({"per_domain": rep.per_domain_accuracy, "ensembles": rep.ensemble_accuracy}))
        elif args.command == "attack":
            cfg = cfgmod.load(args.config) if args.config else None
            print(json.dumps(experiment.attack(args.ckpt, args.domain, args.out, cfg, args.split,
                                               args.restarts, args.limit)))
        elif args.command == "sweep":
            cfg = cfgmod.load(args.config)
            print(experiment.sweep(cfg, args.beta, _workers(args, cfg)))
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"advrex {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
