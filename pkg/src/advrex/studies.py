"""Paired experiments behind the directional checks: undefended collapse and the REx trend.

Both work on any :class:`ExperimentConfig`, so the same code drives the full
MNIST runs and the small proxies used when MNIST is unavailable.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import diffnet
from .config import ExperimentConfig
from .defenses import TrainerState, activate_rex, population_variance, train_epoch
from .diffnet import Batch, NetworkParams
from .evalharness import DomainSet, EvalReport, accuracy, evaluate_report, select_checkpoint
from .experiment import load_splits, new_state

log = logging.getLogger(__name__)


@dataclass
class CollapseResult:
    clean_accuracy: float
    attacked_accuracy: float
    epochs: int


def undefended_collapse(cfg: ExperimentConfig, attack_name: str = "Pinf", n_restarts: int = 10,
                        splits: Optional[tuple[Batch, Batch, Batch]] = None,
                        workers: Optional[int] = None) -> CollapseResult:
    """Train on clean data only for ``cfg.epochs`` epochs, then attack the test split."""
    cfg = copy.deepcopy(cfg)
    cfg.defense.mode = "AVG"
    cfg.defense.seen = ["clean"]
    cfg.domains.setdefault("clean", {"kind": "Clean"})
    train_set, _, test_set = splits or load_splits(cfg)
    state = new_state(cfg)
    for _ in range(cfg.epochs):
        train_epoch(state, train_set)
    clean = float((diffnet.predict(state.params, test_set.inputs) == test_set.labels).mean())
    attacked = accuracy(state.params, test_set, cfg.domain(attack_name), n_restarts, cfg.seed, workers)
    return CollapseResult(clean, attacked, cfg.epochs)


@dataclass
class Arm:
    """One trained model of a paired run (Avg or Avg+REx)."""

    history: list[EvalReport] = field(default_factory=list)
    variance: dict[int, float] = field(default_factory=dict)  # epoch -> Var of per-domain val losses
    best_epoch: Optional[int] = None
    best_params: Optional[NetworkParams] = None
    test: Optional[EvalReport] = None


@dataclass
class TrendRun:
    seed: int
    activation_epoch: int
    avg: Arm
    rex: Arm

    @property
    def variance_at_activation(self) -> float:
        return self.rex.variance[self.activation_epoch]

    @property
    def variance_final(self) -> float:
        return self.rex.variance[max(self.rex.variance)]


def _val_step(state: TrainerState, arm: Arm, val: Batch, sets: Sequence[DomainSet], seen: Sequence[str],
              seed: int, workers, select_from: int):
    rep = evaluate_report(state.params, val, sets, state.epoch, seed, workers)
    arm.history.append(rep)
    arm.variance[state.epoch] = population_variance([rep.per_domain_loss[n] for n in seen])
    eligible = [r for r in arm.history if r.checkpoint_epoch >= select_from]
    if eligible and select_checkpoint(eligible) == state.epoch:
        arm.best_epoch = state.epoch
        arm.best_params = state.params.copy()


def rex_trend(cfg: ExperimentConfig, seeds: Sequence[int], activation_epoch: int,
              splits: Optional[tuple[Batch, Batch, Batch]] = None,
              workers: Optional[int] = None) -> list[TrendRun]:
    """Paired Avg vs Avg+REx runs, one pair per seed.

    ``cfg`` describes the Avg+REx model (mode AVG_REX). The two arms share
    the baseline up to ``activation_epoch`` (bit-identical by construction),
    then continue separately to ``cfg.epochs``. Each arm keeps its own peak
    seen-ensemble checkpoint on validation; the REx arm only considers epochs
    after activation. Both selected checkpoints are evaluated on test.
    """
    if cfg.defense.mode != "AVG_REX":
        raise ValueError("rex_trend expects an AVG_REX config")
    if not 0 < activation_epoch < cfg.epochs:
        raise ValueError("activation_epoch must lie strictly inside the run")
    runs = []
    for seed in seeds:
        c = replace(copy.deepcopy(cfg), seed=seed)
        c.defense.rex_activation_epoch = activation_epoch
        train_set, val_set, test_set = splits or load_splits(c)
        seen = c.seen_eval_names()
        val_sets = c.domain_sets(c.eval.val_restarts, include_unseen=False)
        base = new_state(c)
        base_arm = Arm()
        while base.epoch < activation_epoch:
            train_epoch(base, train_set)
            _val_step(base, base_arm, val_set, val_sets, seen, seed, workers, 0)
        arms = {}
        for name in ("avg", "rex"):
            state = copy.deepcopy(base)
            arm = copy.deepcopy(base_arm)
            if name == "avg":
                state.defense = replace(state.defense, mode="AVG")
            else:
                activate_rex(state)
                arm.best_epoch, arm.best_params = None, None
            while state.epoch < c.epochs:
                train_epoch(state, train_set)
                _val_step(state, arm, val_set, val_sets, seen, seed, workers,
                          0 if name == "avg" else activation_epoch + 1)
            log.info("seed %d %s: best epoch %s", seed, name, arm.best_epoch)
            arm.test = evaluate_report(arm.best_params, test_set, c.domain_sets(c.eval.test_restarts),
                                       arm.best_epoch, seed, workers)
            arms[name] = arm
        runs.append(TrendRun(seed, activation_epoch, arms["avg"], arms["rex"]))
    return runs


def trend_summary(runs: Sequence[TrendRun]) -> dict:
    """The three directional checks, plus the raw numbers behind them."""
    rows = []
    for r in runs:
        rows.append({
            "seed": r.seed,
            "variance_at_activation": r.variance_at_activation,
            "variance_final": r.variance_final,
            "avg_best_epoch": r.avg.best_epoch,
            "rex_best_epoch": r.rex.best_epoch,
            "avg_seen_ensemble": r.avg.test.ensemble_accuracy["seen"],
            "rex_seen_ensemble": r.rex.test.ensemble_accuracy["seen"],
            "avg_clean": r.avg.test.per_domain_accuracy.get("clean", float("nan")),
            "rex_clean": r.rex.test.per_domain_accuracy.get("clean", float("nan")),
            "avg_all_ensemble": r.avg.test.ensemble_accuracy.get("all", float("nan")),
            "rex_all_ensemble": r.rex.test.ensemble_accuracy.get("all", float("nan")),
        })
    variance_drops = [x["variance_final"] < x["variance_at_activation"] for x in rows]
    rex_wins = [x["rex_seen_ensemble"] >= x["avg_seen_ensemble"] for x in rows]
    return {
        "runs": rows,
        "variance_drops": bool(all(variance_drops)),
        "rex_ge_avg_count": int(np.sum(rex_wins)),
        "clean_tradeoff_count": int(sum(x["rex_clean"] < x["avg_clean"] for x in rows)),
    }
