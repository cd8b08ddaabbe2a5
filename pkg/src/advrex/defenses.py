"""Multi-attack training objectives (Avg, Max, MSD, REx) and the SGD trainer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffnet
from .attacks import Domain, run_attack
from .diffnet import Batch, Gradients, NetworkParams
from .rng import stream

MODES = ("AVG", "MAX", "MSD", "AVG_REX", "MSD_REX")


class InvalidStateError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, minibatch: int, cause: Exception):
        super().__init__(f"minibatch {minibatch}: {type(cause).__name__}: {cause}")
        self.minibatch = minibatch


@dataclass
class DefenseConfig:
    seen_domains: list[Domain]
    mode: str = "AVG"
    beta: float = 10.0
    rex_activation_epoch: Optional[int] = None
    rex_domains: list[Domain] = field(default_factory=list)

    def __post_init__(self):
        self.seen_domains = list(self.seen_domains)
        self.rex_domains = list(self.rex_domains)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        # a single AVG/MAX domain is plain ERM (Clean) or single-attack adversarial training
        if not self.seen_domains:
            raise ValueError(f"{self.mode} needs at least 1 seen domain")
        if self.mode == "AVG_REX" and len(self.seen_domains) < 2:
            raise ValueError("AVG_REX needs at least 2 seen domains for the variance term")
        if self.mode in ("MSD", "MSD_REX"):
            if len(self.seen_domains) != 1 or self.seen_domains[0].kind != "MSD":
                raise ValueError(f"{self.mode} trains on exactly one MSD domain")
        if self.is_rex:
            if self.rex_activation_epoch is None or self.rex_activation_epoch < 0:
                raise ValueError(f"{self.mode} needs rex_activation_epoch >= 0")
        if self.mode == "MSD_REX" and len(self.rex_domains) < 2:
            raise ValueError("MSD_REX needs at least 2 rex_domains for the variance term")

    @property
    def is_rex(self) -> bool:
        return self.mode.endswith("_REX")


@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: list[tuple[int, float]] = field(default_factory=list)
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        self.milestones = sorted((int(e), float(lr)) for e, lr in self.milestones)

    def reset(self, params: NetworkParams):
        self.velocity = [np.zeros_like(a) for a in params.arrays()]


@dataclass
class EpochStats:
    epoch: int
    per_domain_mean_loss: dict[str, float]
    avg_loss: float
    variance_term: float
    total_loss: float
    rex_active: bool = False
    mean_batch_objective: float = math.nan


def lr_at(opt: OptimState, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lr = opt.learning_rate
    for start, new_lr in opt.milestones:
        if epoch >= start:
            lr = new_lr
    return lr


def sgd_step(opt: OptimState, params: NetworkParams, grads: Gradients,
             lr: Optional[float] = None) -> NetworkParams:
    """Heavy-ball momentum: v <- mu*v + (g + wd*theta); theta <- theta - lr*v.

    Weight decay applies to weight matrices only. Updates ``opt.velocity`` in
    place and returns new parameters.
    """
    lr = opt.learning_rate if lr is None else lr
    g_arrays = grads.param_arrays()
    p_arrays = params.arrays()
    if len(g_arrays) != len(p_arrays) or any(g.shape != p.shape for g, p in zip(g_arrays, p_arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.isfinite(g).all() for g in g_arrays):
        raise NonFiniteGradientError("non-finite parameter gradient")
    if not opt.velocity:
        opt.reset(params)
    new = []
    for i, (p, g, v) in enumerate(zip(p_arrays, g_arrays, opt.velocity)):
        step = g + opt.weight_decay * p if (opt.weight_decay and i % 2 == 0) else g
        v *= opt.momentum
        v += step
        new.append(p - lr * v)
    return NetworkParams.from_arrays(new)


# --- objectives --------------------------------------------------------------

def perturb(params: NetworkParams, batch: Batch, domains: Sequence[Domain]) -> list[np.ndarray]:
    """One adversarial copy of ``batch`` per domain against the current params (zero init)."""
    return [run_attack(params, batch, d).adv_inputs for d in domains]


def _stack(batch: Batch, advs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate(advs, axis=0), np.tile(batch.labels, len(advs))


def domain_losses(params: NetworkParams, batch: Batch, advs: Sequence[np.ndarray]) -> np.ndarray:
    """Per-sample losses, shape (n_domains, n_samples)."""
    x, y = _stack(batch, advs)
    losses, _ = diffnet.cross_entropy(diffnet.logits(params, x), y)
    return losses.reshape(len(advs), len(batch))


def population_variance(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(((v - v.mean()) ** 2).mean())


def loss_avg(params: NetworkParams, batch: Batch, domains: Sequence[Domain],
             advs: Optional[Sequence[np.ndarray]] = None) -> tuple[float, np.ndarray]:
    """Mean over domains of each domain's batch-mean cross-entropy."""
    if not domains:
        raise ValueError("domains must be non-empty")
    advs = perturb(params, batch, domains) if advs is None else advs
    per_domain = domain_losses(params, batch, advs).mean(axis=1)
    return float(per_domain.mean()), per_domain


def loss_max(params: NetworkParams, batch: Batch, domains: Sequence[Domain],
             advs: Optional[Sequence[np.ndarray]] = None) -> float:
    """Batch mean of the per-sample maximum loss across domains."""
    if not domains:
        raise ValueError("domains must be non-empty")
    advs = perturb(params, batch, domains) if advs is None else advs
    return float(domain_losses(params, batch, advs).max(axis=0).mean())


def loss_rex(params: NetworkParams, batch: Batch, domains: Sequence[Domain], beta: float,
             advs: Optional[Sequence[np.ndarray]] = None) -> tuple[float, EpochStats]:
    """Average loss plus beta times the population variance of per-domain mean losses."""
    if len(domains) < 2:
        raise ValueError("the variance term needs at least 2 domains")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    avg, per_domain = loss_avg(params, batch, domains, advs)
    var = population_variance(per_domain)
    total = avg + beta * var
    stats = EpochStats(-1, {d.name: float(m) for d, m in zip(domains, per_domain)},
                       avg, var, total, rex_active=True, mean_batch_objective=total)
    return total, stats


def objective_weights(losses: np.ndarray, kind: str, beta: float = 0.0) -> tuple[float, np.ndarray]:
    """Objective value and d(objective)/d(per-sample loss) for a (D, n) loss matrix.

    ``kind`` is "avg", "max" or "rex". The weights feed straight into
    :func:`diffnet.backward` as ``sample_weights`` (flattened domain-major).
    """
    n_dom, n = losses.shape
    means = losses.mean(axis=1)
    if kind == "avg":
        return float(means.mean()), np.full((n_dom, n), 1.0 / (n_dom * n))
    if kind == "max":
        worst = np.argmax(losses, axis=0)
        w = np.zeros((n_dom, n))
        w[worst, np.arange(n)] = 1.0 / n
        return float(losses.max(axis=0).mean()), w
    if kind == "rex":
        avg = means.mean()
        total = float(avg + beta * population_variance(means))
        dom_w = 1.0 / n_dom + 2.0 * beta * (means - avg) / n_dom
        return total, np.repeat(dom_w[:, None] / n, n, axis=1)
    raise ValueError(f"unknown objective {kind!r}")


def objective_and_grads(params: NetworkParams, batch: Batch, advs: Sequence[np.ndarray],
                        kind: str, beta: float = 0.0) -> tuple[float, np.ndarray, Gradients]:
    """Objective, per-domain mean losses, and parameter gradients with perturbations held fixed."""
    x, y = _stack(batch, advs)
    trace = diffnet.forward(params, x)
    losses, _ = diffnet.cross_entropy(trace.logits, y)
    losses = losses.reshape(len(advs), len(batch))
    total, w = objective_weights(losses, kind, beta)
    grads = diffnet.backward(params, trace, y, w.ravel())
    return total, losses.mean(axis=1), grads


# --- trainer -----------------------------------------------------------------

@dataclass
class TrainerState:
    params: NetworkParams
    opt: OptimState
    defense: DefenseConfig
    seed: int = 0
    batch_size: int = 128
    epoch: int = 0  # completed epochs
    rex_active: bool = False

    def __post_init__(self):
        if not self.opt.velocity:
            self.opt.reset(self.params)

    @property
    def active_domains(self) -> list[Domain]:
        if self.rex_active and self.defense.mode == "MSD_REX":
            return self.defense.rex_domains
        return self.defense.seen_domains

    @property
    def objective(self) -> str:
        if self.rex_active:
            return "rex"
        return "max" if self.defense.mode == "MAX" else "avg"

    def rex_due(self) -> bool:
        d = self.defense
        return d.is_rex and not self.rex_active and self.epoch >= d.rex_activation_epoch


def activate_rex(state: TrainerState) -> TrainerState:
    """Switch to the REx objective and zero the momentum buffers."""
    if not state.defense.is_rex:
        raise InvalidStateError(f"mode {state.defense.mode} has no REx phase")
    if state.rex_active:
        raise InvalidStateError("REx is already active")
    if state.epoch != state.defense.rex_activation_epoch:
        raise InvalidStateError(
            f"REx activates at epoch {state.defense.rex_activation_epoch}, trainer is at {state.epoch}")
    state.rex_active = True
    state.opt.reset(state.params)
    return state


def train_epoch(state: TrainerState, dataset: Batch) -> EpochStats:
    """One pass over ``dataset`` in a seeded shuffle order.

    Every minibatch is attacked afresh against the current parameters.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    if state.rex_due():
        activate_rex(state)
    domains = state.active_domains
    kind = state.objective
    beta = state.defense.beta
    lr = lr_at(state.opt, state.epoch)
    order = stream(state.seed, "shuffle", state.epoch).permutation(n)
    loss_sums = np.zeros(len(domains))
    objective_sum = 0.0
    for b, start in enumerate(range(0, n, state.batch_size)):
        mb = dataset.subset(order[start:start + state.batch_size])
        try:
            advs = perturb(state.params, mb, domains)
            total, means, grads = objective_and_grads(state.params, mb, advs, kind, beta)
            state.params = sgd_step(state.opt, state.params, grads, lr)
        except (ValueError, FloatingPointError) as e:
            raise TrainingError(b, e) from e
        loss_sums += means * len(mb)
        objective_sum += total * len(mb)
    means = loss_sums / n
    avg = float(means.mean())
    var = population_variance(means)
    if state.rex_active:
        total = avg + beta * var
    elif kind == "max":
        total = objective_sum / n
    else:
        total = avg
    stats = EpochStats(state.epoch, {d.name: float(m) for d, m in zip(domains, means)},
                       avg, var, total, state.rex_active, objective_sum / n)
    state.epoch += 1
    return stats
