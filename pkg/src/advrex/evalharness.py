"""Per-domain and worst-case ensemble accuracy.

A sample counts as robust on an ensemble only if no member attack (after
restarts) misclassifies it. Attacks run once per domain; ensembles are
intersections of the stored per-sample masks.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attacks import Attack, Domain, perturb_with_restarts
from .diffnet import Batch, NetworkParams

SHARD_SIZE = 250  # fixed so results do not depend on the worker count


@dataclass(frozen=True)
class DomainSet:
    name: str
    domains: tuple[Domain, ...]
    n_restarts: int = 1

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if not self.domains:
            raise ValueError(f"domain set {self.name!r} is empty")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass
class DomainOutcome:
    """Per-sample outcome of one restart-aggregated attack on a dataset."""

    domain: Domain
    n_restarts: int
    correct: np.ndarray  # bool per sample
    loss: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean())


@dataclass
class EvalReport:
    checkpoint_epoch: int
    per_domain_accuracy: dict[str, float]
    ensemble_accuracy: dict[str, float]
    n_samples: int
    seed: int
    per_domain_loss: dict[str, float] = field(default_factory=dict)
    ensemble_loss: dict[str, float] = field(default_factory=dict)
    n_restarts: dict[str, int] = field(default_factory=dict)


def _shard(args):
    params, inputs, labels, ids, domain, n_restarts, seed = args
    res = perturb_with_restarts(Attack(params, domain), Batch(inputs, labels), n_restarts, seed, ids)
    return res.success_mask, res.per_sample_loss


def default_workers() -> int:
    env = os.environ.get("ADVREX_WORKERS")
    return max(1, int(env)) if env else 1


def domain_outcome(params: NetworkParams, dataset: Batch, domain: Domain, n_restarts: int,
                   seed: int, workers: Optional[int] = None) -> DomainOutcome:
    """Run one domain over ``dataset`` in fixed-size shards, optionally in parallel."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    workers = default_workers() if workers is None else workers
    n = len(dataset)
    jobs = []
    for s in range(0, n, SHARD_SIZE):
        ids = np.arange(s, min(n, s + SHARD_SIZE))
        jobs.append((params, dataset.inputs[ids], dataset.labels[ids], ids, domain, n_restarts, seed))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_shard, jobs))
    else:
        parts = [_shard(j) for j in jobs]
    fooled = np.concatenate([p[0] for p in parts])
    loss = np.concatenate([p[1] for p in parts])
    return DomainOutcome(domain, n_restarts, ~fooled, loss)


def accuracy(params: NetworkParams, dataset: Batch, domain: Domain, n_restarts: int = 1,
             seed: int = 0, workers: Optional[int] = None) -> float:
    return domain_outcome(params, dataset, domain, n_restarts, seed, workers).accuracy


def ensemble_from_outcomes(outcomes: Sequence[DomainOutcome]) -> tuple[float, float]:
    """Worst-case accuracy and mean worst-case loss of a group of outcomes."""
    correct = np.logical_and.reduce([o.correct for o in outcomes])
    worst_loss = np.max([o.loss for o in outcomes], axis=0)
    return float(correct.mean()), float(worst_loss.mean())


def ensemble_accuracy(params: NetworkParams, dataset: Batch, domain_set: DomainSet, seed: int = 0,
                      workers: Optional[int] = None) -> float:
    outcomes = [domain_outcome(params, dataset, d, domain_set.n_restarts, seed, workers)
                for d in domain_set.domains]
    return ensemble_from_outcomes(outcomes)[0]


def evaluate_report(params: NetworkParams, dataset: Batch, domain_sets: Sequence[DomainSet],
                    epoch: int, seed: int, workers: Optional[int] = None,
                    extra_domains: Sequence[Domain] = ()) -> EvalReport:
    """Attack once per distinct domain and build every ensemble from the stored masks.

    A domain appearing in several sets uses the largest ``n_restarts`` among
    them. ``extra_domains`` are reported individually but join no ensemble.
    """
    if not domain_sets:
        raise ValueError("domain_sets must be non-empty")
    restarts: dict[str, int] = {}
    by_name: dict[str, Domain] = {}
    for ds in domain_sets:
        for d in ds.domains:
            if d.name in by_name and by_name[d.name] != d:
                raise ValueError(f"two different domains are named {d.name!r}")
            by_name[d.name] = d
            restarts[d.name] = max(restarts.get(d.name, 1), ds.n_restarts)
    extra_restarts = max(ds.n_restarts for ds in domain_sets)
    for d in extra_domains:
        if d.name not in by_name:
            by_name[d.name] = d
            restarts[d.name] = extra_restarts
    outcomes = {name: domain_outcome(params, dataset, d, restarts[name], seed, workers)
                for name, d in by_name.items()}
    report = EvalReport(epoch, {}, {}, len(dataset), seed, n_restarts=dict(restarts))
    for name, o in outcomes.items():
        report.per_domain_accuracy[name] = o.accuracy
        report.per_domain_loss[name] = float(o.loss.mean())
    for ds in domain_sets:
        acc, loss = ensemble_from_outcomes([outcomes[d.name] for d in ds.domains])
        report.ensemble_accuracy[ds.name] = acc
        report.ensemble_loss[ds.name] = loss
    return report


def select_checkpoint(history: Sequence[EvalReport], set_name: str = "seen") -> int:
    """Epoch with the highest ``set_name`` ensemble accuracy; earliest epoch wins ties."""
    if not history:
        raise ValueError("history is empty")
    best_epoch, best_acc = None, -np.inf
    for rep in history:
        if set_name not in rep.ensemble_accuracy:
            raise ValueError(f"report for epoch {rep.checkpoint_epoch} has no {set_name!r} ensemble")
        acc = rep.ensemble_accuracy[set_name]
        if acc > best_acc or (acc == best_acc and rep.checkpoint_epoch < best_epoch):
            best_epoch, best_acc = rep.checkpoint_epoch, acc
    return best_epoch


def params_checksum(params: NetworkParams) -> str:
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
