"""Train an undefended (clean-only) MLP and attack it with L-inf PGD.

    python scripts/run_undefended.py --mnist data/mnist
    python scripts/run_undefended.py            # sklearn digits proxy
"""
import argparse
import json

from advrex import config, studies


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--mnist", help="directory with the four MNIST IDX files; omit for the digits proxy")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    args = p.parse_args()
    pinf = {"kind": "PGD", "norm": "Linf", "epsilon": 0.3, "step_size": 0.01, "n_iter": 40}
    if args.mnist:
        cfg = config.preset("mnist-paper", dataset={"path": args.mnist}, epochs=args.epochs or 20, seed=args.seed)
    else:
        cfg = config.preset("digits-proxy", epochs=args.epochs or 30, seed=args.seed,
                            optimizer={"learning_rate": 0.05})
    cfg.domains["Pinf_eval"] = pinf
    res = studies.undefended_collapse(cfg, "Pinf_eval", args.restarts, workers=args.workers)
    print(json.dumps({"dataset": cfg.dataset.kind, "epochs": res.epochs, "clean_accuracy": res.clean_accuracy,
                      "pgd_linf_0.3_accuracy": res.attacked_accuracy}, indent=2))


if __name__ == "__main__":
    main()
