"""Paired Avg vs Avg+REx runs over several seeds; prints the variance and ensemble trend.

    python scripts/run_rex_trend.py --mnist data/mnist --epochs 300 --activate 194
    python scripts/run_rex_trend.py                       # digits proxy, 40 epochs
"""
import argparse
import json
import logging

from advrex import config, studies


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--mnist", help="directory with the four MNIST IDX files; omit for the digits proxy")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--activate", type=int, default=None, help="epoch after which REx starts")
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="write the summary JSON here as well")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.mnist:
        epochs = args.epochs or 300
        cfg = config.preset("mnist-paper", dataset={"path": args.mnist}, epochs=epochs)
    else:
        epochs = args.epochs or 40
        cfg = config.preset("digits-proxy", epochs=epochs, optimizer={"learning_rate": 0.05},
                            eval={"unseen": ["DFinf_strong"], "report_only": []})
    activate = args.activate if args.activate is not None else round(epochs * 726 / 1125)
    cfg.defense.mode = "AVG_REX"
    cfg.defense.beta = args.beta
    cfg.defense.rex_activation_epoch = activate
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = studies.trend_summary(studies.rex_trend(cfg, seeds, activate, workers=args.workers))
    text = json.dumps(summary, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")


if __name__ == "__main__":
    main()
