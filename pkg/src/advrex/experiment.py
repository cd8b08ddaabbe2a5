"""Run directories: training with periodic validation, test evaluation, single attacks, beta sweeps.

Epoch numbers in logs and checkpoints count *completed* epochs, so the row
for epoch 3 describes the parameters after three passes over the data, and
``rex_activation_epoch = 3`` means the fourth pass is the first REx pass.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks, config as cfgmod, data, diffnet
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .defenses import EpochStats, TrainerState, train_epoch
from .diffnet import Batch
from .evalharness import EvalReport, evaluate_report, select_checkpoint

log = logging.getLogger(__name__)

CSV_VERSION_LINE = "# advrex-metrics v1"
CSV_HEADER = ["epoch", "split", "domain_or_ensemble", "accuracy", "mean_loss", "n_restarts", "seed"]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class MetricsLog:
    """Append-only CSV writer; the first line carries the schema version."""

    def __init__(self, path, truncate_after: Optional[int] = None):
        self.path = Path(path)
        rows = read_metrics(self.path) if (truncate_after is not None and self.path.exists()) else None
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            f.write(CSV_VERSION_LINE + "\n")
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in rows or []:
                if int(r["epoch"]) <= truncate_after:
                    w.writerow([r[k] for k in CSV_HEADER])

    def write(self, rows: Sequence[Sequence]):
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
        if first != CSV_VERSION_LINE:
            raise ValueError(f"{path}: unsupported metrics schema line {first!r}")
        return list(csv.DictReader(f))


def train_rows(stats: EpochStats, epoch: int, seed: int) -> list[list[str]]:
    rows = [[epoch, "train", name, "", _fmt(loss), 0, seed]
            for name, loss in stats.per_domain_mean_loss.items()]
    rows.append([epoch, "train", "variance", "", _fmt(stats.variance_term), 0, seed])
    rows.append([epoch, "train", "objective", "", _fmt(stats.total_loss), 0, seed])
    return rows


def report_rows(report: EvalReport, split: str) -> list[list[str]]:
    rows = []
    for name, acc in report.per_domain_accuracy.items():
        rows.append([report.checkpoint_epoch, split, name, _fmt(acc), _fmt(report.per_domain_loss.get(name)),
                     report.n_restarts.get(name, 1), report.seed])
    for name, acc in report.ensemble_accuracy.items():
        rows.append([report.checkpoint_epoch, split, f"ensemble:{name}", _fmt(acc),
                     _fmt(report.ensemble_loss.get(name)), max(report.n_restarts.values(), default=1),
                     report.seed])
    return rows


def history_from_metrics(rows: Sequence[dict[str, str]], split: str = "val") -> list[EvalReport]:
    by_epoch: dict[int, EvalReport] = {}
    for r in rows:
        if r["split"] != split:
            continue
        e = int(r["epoch"])
        rep = by_epoch.setdefault(e, EvalReport(e, {}, {}, 0, int(r["seed"])))
        name = r["domain_or_ensemble"]
        if name.startswith("ensemble:"):
            rep.ensemble_accuracy[name.split(":", 1)[1]] = float(r["accuracy"])
        else:
            rep.per_domain_accuracy[name] = float(r["accuracy"])
    return [by_epoch[e] for e in sorted(by_epoch)]


def load_splits(cfg: ExperimentConfig) -> tuple[Batch, Batch, Batch]:
    d = cfg.dataset
    if d.kind == "mnist":
        return data.mnist_splits(d.path, d.n_train, d.n_val, d.n_test)
    if d.kind == "digits":
        return data.digits_splits(d.n_train, d.n_val, d.n_test, cfg.seed)
    full = data.synthetic_dataset(d.kind, d.n_train + d.n_val + d.n_test, d.noise, cfg.seed)
    a, b = d.n_train, d.n_train + d.n_val
    return full.subset(slice(0, a)), full.subset(slice(a, b)), full.subset(slice(b, None))


def new_state(cfg: ExperimentConfig) -> TrainerState:
    return TrainerState(diffnet.init_network(cfg.layer_sizes, cfg.seed), cfg.optim_state(),
                        cfg.defense_config(), cfg.seed, cfg.batch_size)


def state_checkpoint(state: TrainerState, cfg: ExperimentConfig) -> Checkpoint:
    return Checkpoint(state.params, [v.copy() for v in state.opt.velocity], state.epoch, cfg.hash(),
                      state.rex_active, {"generator": "philox", "seed": cfg.seed, "next_epoch": state.epoch},
                      cfgmod.dumps(cfg))


def state_from_checkpoint(ckpt: Checkpoint, cfg: ExperimentConfig, force: bool = False) -> TrainerState:
    if ckpt.config_hash != cfg.hash() and not force:
        raise CheckpointError(f"checkpoint config hash {ckpt.config_hash} != {cfg.hash()}; "
                              "pass force to resume anyway")
    if ckpt.layer_sizes != list(cfg.layer_sizes):
        raise CheckpointError(f"checkpoint layer_sizes {ckpt.layer_sizes} != config {cfg.layer_sizes}")
    opt = cfg.optim_state()
    opt.velocity = [v.copy() for v in ckpt.velocity]
    return TrainerState(ckpt.params.copy(), opt, cfg.defense_config(), cfg.seed, cfg.batch_size,
                        ckpt.epoch, ckpt.rex_active)


@dataclass
class TrainResult:
    out_dir: Path
    stats: list[EpochStats] = field(default_factory=list)
    history: list[EvalReport] = field(default_factory=list)
    best_epoch: Optional[int] = None
    state: Optional[TrainerState] = None


def train(cfg: ExperimentConfig, resume=None, force: bool = False, workers: Optional[int] = None,
          splits: Optional[tuple[Batch, Batch, Batch]] = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (total, counting any resumed ones).

    Writes ``metrics.csv``, ``config.toml``, ``latest.ckpt``, ``best.ckpt``
    (peak validation seen-ensemble) and ``summary.json`` under ``cfg.output_dir``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    workers = cfg.workers if workers is None else workers
    train_set, val_set, _ = splits or load_splits(cfg)
    metrics_path = out / "metrics.csv"
    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume, cfg.layer_sizes), cfg, force)
        metrics = MetricsLog(metrics_path, truncate_after=state.epoch)
        history = history_from_metrics(read_metrics(metrics_path))
    else:
        state = new_state(cfg)
        metrics = MetricsLog(metrics_path)
        history = []
    result = TrainResult(out, history=history, state=state)
    best_acc = max((r.ensemble_accuracy.get("seen", -1.0) for r in history), default=-1.0)
    seen_sets = cfg.domain_sets(cfg.eval.val_restarts, include_unseen=False)
    all_sets = cfg.domain_sets(cfg.eval.val_restarts)
    while state.epoch < cfg.epochs:
        stats = train_epoch(state, train_set)
        result.stats.append(stats)
        done = state.epoch
        metrics.write(train_rows(stats, done, cfg.seed))
        log.info("epoch %d: objective %.4f variance %.4g rex=%s", done, stats.total_loss,
                 stats.variance_term, stats.rex_active)
        if done % cfg.eval.every == 0 or done == cfg.epochs:
            full = done % cfg.eval.unseen_every == 0 or done == cfg.epochs
            report = evaluate_report(state.params, val_set, all_sets if full else seen_sets, done, cfg.seed,
                                     workers, cfg.report_only_domains() if full else ())
            metrics.write(report_rows(report, "val"))
            history.append(report)
            acc = report.ensemble_accuracy["seen"]
            log.info("epoch %d: val seen-ensemble %.4f", done, acc)
            if acc > best_acc:
                best_acc = acc
                save_checkpoint(out / "best.ckpt", state_checkpoint(state, cfg))
        save_checkpoint(out / "latest.ckpt", state_checkpoint(state, cfg))
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{done:05d}.ckpt", state_checkpoint(state, cfg))
    if history:
        result.best_epoch = select_checkpoint(history)
    (out / "summary.json").write_text(json.dumps({
        "best_epoch": result.best_epoch, "epochs": state.epoch, "config_hash": cfg.hash(),
        "rex_active": state.rex_active}, indent=2) + "\n", encoding="utf-8")
    return result


def evaluate(cfg: ExperimentConfig, ckpt_path, out_csv, workers: Optional[int] = None,
             split: str = "test") -> EvalReport:
    """Evaluate a checkpoint on the configured domain sets with ``eval.test_restarts`` restarts."""
    ckpt = load_checkpoint(ckpt_path, cfg.layer_sizes)
    train_set, val_set, test_set = load_splits(cfg)
    dataset = {"train": train_set, "val": val_set, "test": test_set}[split]
    restarts = cfg.eval.test_restarts if split == "test" else cfg.eval.val_restarts
    report = evaluate_report(ckpt.params, dataset, cfg.domain_sets(restarts), ckpt.epoch, cfg.seed,
                             cfg.workers if workers is None else workers, cfg.report_only_domains())
    MetricsLog(out_csv).write(report_rows(report, split))
    return report


def attack(ckpt_path, domain_name: str, out_dir, cfg: Optional[ExperimentConfig] = None,
           split: str = "test", n_restarts: Optional[int] = None, limit: Optional[int] = None) -> dict:
    """Attack one split with one domain; writes ``adv_inputs.npy`` and ``outcomes.csv``."""
    ckpt = load_checkpoint(ckpt_path)
    if cfg is None:
        if not ckpt.config_text:
            raise CheckpointError(f"{ckpt_path}: no embedded config; pass one explicitly")
        cfg = cfgmod.loads(ckpt.config_text)
    if domain_name not in cfg.domains:
        raise ValueError(f"unknown domain {domain_name!r} (known: {sorted(cfg.domains)})")
    domain = cfg.domain(domain_name)
    train_set, val_set, test_set = load_splits(cfg)
    dataset = {"train": train_set, "val": val_set, "test": test_set}[split]
    if limit is not None:
        dataset = dataset.subset(slice(0, limit))
    restarts = cfg.eval.test_restarts if n_restarts is None else n_restarts
    res = attacks.perturb_with_restarts(attacks.Attack(ckpt.params, domain), dataset, restarts, cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "adv_inputs.npy", res.adv_inputs)
    clean_pred = diffnet.predict(ckpt.params, dataset.inputs)
    adv_pred = diffnet.predict(ckpt.params, res.adv_inputs)
    delta = res.adv_inputs - dataset.inputs
    with open(out / "outcomes.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label", "clean_pred", "adv_pred", "success", "loss", "linf", "l2", "l1"])
        for i in range(len(dataset)):
            w.writerow([i, int(dataset.labels[i]), int(clean_pred[i]), int(adv_pred[i]),
                        int(res.success_mask[i]), _fmt(res.per_sample_loss[i]),
                        *(_fmt(attacks.lp_norm(delta[i], p)) for p in ("Linf", "L2", "L1"))])
    summary = {"domain": domain_name, "n": len(dataset), "accuracy": float(1 - res.success_mask.mean()),
               "n_restarts": restarts, "epoch": ckpt.epoch}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def sweep_config(cfg: ExperimentConfig, beta: float) -> ExperimentConfig:
    """Config for one sweep point. beta = 0 runs the plain baseline (no REx phase, no momentum reset)."""
    c = copy.deepcopy(cfg)
    c.output_dir = str(Path(cfg.output_dir) / f"beta_{beta:g}")
    c.defense.beta = float(beta)
    if beta == 0 and c.defense.mode.endswith("_REX"):
        c.defense.mode = c.defense.mode[: -len("_REX")]
    return c


def sweep(cfg: ExperimentConfig, betas: Sequence[float], workers: Optional[int] = None) -> Path:
    """Train once per beta, evaluate each best checkpoint on the test split, collect ``sweep.csv``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for beta in betas:
        c = sweep_config(cfg, beta)
        res = train(c, workers=workers)
        ckpt = res.out_dir / ("best.ckpt" if (res.out_dir / "best.ckpt").exists() else "latest.ckpt")
        report = evaluate(c, ckpt, res.out_dir / "test.csv", workers)
        rows += [[_fmt(beta)] + r for r in report_rows(report, "test")]
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(CSV_VERSION_LINE + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["beta"] + CSV_HEADER)
        w.writerows(rows)
    return path
