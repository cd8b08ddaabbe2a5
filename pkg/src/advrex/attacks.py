"""White-box attacks on :mod:`advrex.diffnet` networks.

All attacks work on whole batches, keep inputs inside [0, 1], and compute
per-sample input gradients (gradient of each sample's own loss), so the
result for one sample never depends on which other samples share its batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffnet
from .diffnet import Batch, NetworkParams
from .rng import stream

KINDS = ("Clean", "FGSM", "PGD", "DeepFool", "CW2", "MSD")
NORMS = ("Linf", "L2", "L1")  # also the MSD tie-break order

_ITERATIVE = {"PGD", "DeepFool", "MSD"}


@dataclass(frozen=True)
class Domain:
    """A named perturbation generator and its tuning.

    ``epsilon``/``step_size``/``n_iter`` are in data units. CW2 uses
    ``max_iterations``, ``learning_rate``, ``binary_search_steps``,
    ``confidence`` and ``initial_const``; DeepFool uses ``overshoot``; MSD
    carries its three per-norm PGD tunings in ``components``.
    """

    name: str
    kind: str
    norm: Optional[str] = None
    epsilon: Optional[float] = None
    step_size: Optional[float] = None
    n_iter: Optional[int] = None
    max_iterations: int = 20
    learning_rate: float = 0.1
    binary_search_steps: int = 5
    confidence: float = 0.0
    initial_const: float = 1e-2
    overshoot: float = 0.02
    components: tuple["Domain", ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown attack kind {self.kind!r}")
        if self.kind == "Clean":
            if any(v is not None for v in (self.norm, self.epsilon, self.step_size, self.n_iter)):
                raise ValueError(f"{self.name}: Clean domain carries no tuning")
            return
        if self.kind in ("PGD",) and self.norm not in NORMS:
            raise ValueError(f"{self.name}: PGD needs a norm in {NORMS}")
        if self.kind in ("PGD", "DeepFool") and not (self.epsilon and self.epsilon > 0):
            raise ValueError(f"{self.name}: epsilon must be > 0")
        if self.kind in ("PGD", "FGSM") and not (self.step_size and self.step_size > 0):
            raise ValueError(f"{self.name}: step_size must be > 0")
        if self.kind in _ITERATIVE and not (self.n_iter and self.n_iter >= 1):
            raise ValueError(f"{self.name}: n_iter must be >= 1")
        if self.kind == "CW2":
            if self.max_iterations < 1 or self.binary_search_steps < 1 or self.learning_rate <= 0:
                raise ValueError(f"{self.name}: invalid CW2 tuning")
        if self.kind == "MSD":
            norms = sorted(c.norm for c in self.components if c.kind == "PGD")
            if norms != sorted(NORMS) or len(self.components) != 3:
                raise ValueError(f"{self.name}: MSD needs one PGD tuning per norm {NORMS}")

    @property
    def randomized(self) -> bool:
        """Whether restarts draw a different starting point."""
        return self.kind in ("PGD", "MSD")

    def component(self, norm: str) -> "Domain":
        for c in self.components:
            if c.norm == norm:
                return c
        raise ValueError(f"{self.name}: no {norm} tuning")


CLEAN = Domain("clean", "Clean")


@dataclass
class AttackResult:
    adv_inputs: np.ndarray
    success_mask: np.ndarray
    per_sample_loss: np.ndarray


def _check_finite(a: np.ndarray, what: str):
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite entries")


def lp_norm(delta: np.ndarray, norm: str) -> np.ndarray:
    """Row-wise norm (scalar for a 1-D input)."""
    d = np.atleast_2d(delta)
    if norm == "Linf":
        out = np.abs(d).max(axis=1)
    elif norm == "L2":
        out = np.sqrt((d * d).sum(axis=1))
    elif norm == "L1":
        out = np.abs(d).sum(axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out if np.ndim(delta) == 2 else out[0]


def _project_l1(d: np.ndarray, eps: float) -> np.ndarray:
    # sort-based simplex projection applied to |d|, signs restored afterwards
    a = np.abs(d)
    outside = a.sum(axis=1) > eps
    if not outside.any():
        return d.copy()
    out = d.copy()
    ao = a[outside]
    u = -np.sort(-ao, axis=1)
    css = np.cumsum(u, axis=1)
    j = np.arange(1, u.shape[1] + 1)
    cond = u - (css - eps) / j > 0
    rho = u.shape[1] - np.argmax(cond[:, ::-1], axis=1)  # last index where cond holds, 1-based
    theta = (css[np.arange(len(rho)), rho - 1] - eps) / rho
    out[outside] = np.sign(d[outside]) * np.maximum(ao - theta[:, None], 0.0)
    return out


def project_ball(delta, norm: str, epsilon: float) -> np.ndarray:
    """Euclidean projection onto {v : ||v||_norm <= epsilon}, row-wise for 2-D input."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    delta = np.asarray(delta, dtype=np.float64)
    _check_finite(delta, "delta")
    d = np.atleast_2d(delta)
    if norm == "Linf":
        out = np.clip(d, -epsilon, epsilon)
    elif norm == "L2":
        n = np.sqrt((d * d).sum(axis=1, keepdims=True))
        scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        out = d * scale
    elif norm == "L1":
        out = _project_l1(d, epsilon)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out if delta.ndim == 2 else out[0]


def steepest_step(grad, norm: str, alpha: float) -> np.ndarray:
    """Steepest-ascent step of length ``alpha`` under ``norm``, row-wise for 2-D input.

    Linf: sign step. L2: normalized gradient (zero when the norm is < 1e-12).
    L1: the single coordinate with the largest |gradient|, lowest index on ties.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    grad = np.asarray(grad, dtype=np.float64)
    _check_finite(grad, "grad")
    g = np.atleast_2d(grad)
    if norm == "Linf":
        out = alpha * np.sign(g)
    elif norm == "L2":
        n = np.sqrt((g * g).sum(axis=1, keepdims=True))
        out = np.where(n < 1e-12, 0.0, alpha * g / np.where(n < 1e-12, 1.0, n))
    elif norm == "L1":
        out = np.zeros_like(g)
        i = np.argmax(np.abs(g), axis=1)
        rows = np.arange(g.shape[0])
        out[rows, i] = alpha * np.sign(g[rows, i])
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return out if grad.ndim == 2 else out[0]


def _box_feasible_grad(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    # L1 picks one coordinate; skip coordinates the [0,1] clamp would pin in place
    blocked = ((x >= 1.0) & (grad > 0)) | ((x <= 0.0) & (grad < 0))
    return np.where(blocked, 0.0, grad)


def _clamp(x0: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(x0 + delta, 0.0, 1.0)


def _result(params: NetworkParams, adv: np.ndarray, labels: np.ndarray) -> AttackResult:
    z = diffnet.logits(params, adv)
    loss, _ = diffnet.cross_entropy(z, labels)
    return AttackResult(adv, np.argmax(z, axis=1) != labels, loss)


def _sample_ids(n: int, sample_ids) -> np.ndarray:
    if sample_ids is None:
        return np.arange(n)
    ids = np.asarray(sample_ids, dtype=np.int64)
    if ids.shape != (n,):
        raise ValueError("sample_ids must have one entry per sample")
    return ids


def random_delta(shape: tuple[int, int], norm: str, epsilon: float, seed: int, restart: int,
                 sample_ids=None) -> np.ndarray:
    """Uniform draws from the epsilon ball, one independent stream per sample.

    Linf: per-coordinate uniform. L2: Gaussian direction times eps*u^(1/d).
    L1: flat Dirichlet over d+1 slots (the last one is slack) with random
    signs, which is uniform on the L1 ball.
    """
    n, d = shape
    ids = _sample_ids(n, sample_ids)
    out = np.empty(shape)
    for row, sid in enumerate(ids):
        rng = stream(seed, "attack-restart", restart, int(sid))
        if norm == "Linf":
            out[row] = rng.uniform(-epsilon, epsilon, size=d)
        elif norm == "L2":
            v = rng.standard_normal(d)
            out[row] = v / np.linalg.norm(v) * epsilon * rng.random() ** (1.0 / d)
        elif norm == "L1":
            w = rng.dirichlet(np.ones(d + 1))[:d]
            out[row] = epsilon * w * rng.choice((-1.0, 1.0), size=d)
        else:
            raise ValueError(f"unknown norm {norm!r}")
    return out


def _require(domain: Domain, kind: str):
    if domain.kind != kind:
        raise ValueError(f"expected a {kind} domain, got {domain.kind} ({domain.name})")


def fgsm(params: NetworkParams, batch: Batch, alpha: float) -> AttackResult:
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    x0 = diffnet._as_inputs(params, batch)
    g, _ = diffnet.input_gradient(params, x0, batch.labels)
    return _result(params, np.clip(x0 + alpha * np.sign(g), 0.0, 1.0), batch.labels)


IterateHook = Callable[[int, np.ndarray], None]


def _pgd_candidate(x0, x, g, norm, eps, alpha):
    if norm == "L1":
        g = _box_feasible_grad(g, x)
    delta = (x - x0) + steepest_step(g, norm, alpha)
    return _clamp(x0, project_ball(delta, norm, eps))


def pgd(params: NetworkParams, batch: Batch, domain: Domain, init: str = "zero", seed: int = 0,
        restart: int = 0, sample_ids=None, on_iterate: Optional[IterateHook] = None) -> AttackResult:
    """Projected steepest ascent; returns the final iterate.

    Each step is steepest_step, then projection onto the epsilon ball around
    the clean input, then a clamp to [0, 1].
    """
    _require(domain, "PGD")
    x0 = diffnet._as_inputs(params, batch)
    y = batch.labels
    if init == "zero":
        x = x0.copy()
    elif init == "random":
        x = _clamp(x0, random_delta(x0.shape, domain.norm, domain.epsilon, seed, restart, sample_ids))
    else:
        raise ValueError(f"init must be 'zero' or 'random', got {init!r}")
    if on_iterate:
        on_iterate(0, x)
    for t in range(domain.n_iter):
        g, _ = diffnet.input_gradient(params, x, y)
        x = _pgd_candidate(x0, x, g, domain.norm, domain.epsilon, domain.step_size)
        if on_iterate:
            on_iterate(t + 1, x)
    return _result(params, x, y)


def deepfool(params: NetworkParams, batch: Batch, domain: Domain) -> AttackResult:
    """L-infinity DeepFool, clipped afterwards to the epsilon ball and [0, 1].

    Each iteration linearizes every logit difference z_k - z_y and steps
    (with a 1e-4 margin) onto the closest linearized boundary, measured with
    the L1 dual norm of the gradient difference. Samples stop as soon as they
    are misclassified. The accumulated step is scaled by (1 + overshoot).
    """
    _require(domain, "DeepFool")
    x0 = diffnet._as_inputs(params, batch)
    y = batch.labels
    n = len(y)
    r_tot = np.zeros_like(x0)
    x = x0.copy()
    active = diffnet.predict(params, x0) == y
    for _ in range(domain.n_iter):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        z, jac = diffnet.logit_jacobian(params, x[idx])
        rows = np.arange(len(idx))
        yi = y[idx]
        w = jac - jac[rows, yi][:, None, :]
        f = z - z[rows, yi][:, None]
        dual = np.abs(w).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            pert = np.where(dual > 0, np.abs(f) / dual, np.inf)
        pert[rows, yi] = np.inf
        best = np.argmin(pert, axis=1)
        p = pert[rows, best]
        step = np.where(np.isfinite(p), p + 1e-4, 0.0)[:, None] * np.sign(w[rows, best])
        r_tot[idx] += step
        x[idx] = _clamp(x0[idx], (1.0 + domain.overshoot) * r_tot[idx])
        active[idx] = diffnet.predict(params, x[idx]) == yi
    delta = project_ball((1.0 + domain.overshoot) * r_tot, "Linf", domain.epsilon) if n else r_tot
    return _result(params, _clamp(x0, delta), y)


def _cw_margin(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(len(y))
    other = z.copy()
    other[rows, y] = -np.inf
    k = np.argmax(other, axis=1)
    return z[rows, y] - z[rows, k], k


def cw2(params: NetworkParams, batch: Batch, domain: Domain) -> AttackResult:
    """Carlini-Wagner L2 (untargeted) in tanh space with a binary search on c.

    Minimizes ||x' - x||^2 + c * max(z_y - max_{i != y} z_i, -kappa) with Adam.
    Samples that never succeed are returned unperturbed.
    """
    _require(domain, "CW2")
    x0 = diffnet._as_inputs(params, batch)
    y = batch.labels
    n, d = x0.shape
    kappa = domain.confidence
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    const = np.full(n, domain.initial_const)
    best_l2 = np.full(n, np.inf)
    best_adv = x0.copy()
    w0 = np.arctanh((2.0 * x0 - 1.0) * (1.0 - 1e-6))
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    rows = np.arange(n)
    for _ in range(domain.binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        hit = np.zeros(n, dtype=bool)
        for it in range(domain.max_iterations + 1):
            x = (np.tanh(w) + 1.0) / 2.0
            trace = diffnet.forward(params, x)
            margin, k = _cw_margin(trace.logits, y)
            l2 = ((x - x0) ** 2).sum(axis=1)
            ok = -margin > kappa
            improve = ok & (l2 < best_l2)
            best_l2[improve] = l2[improve]
            best_adv[improve] = x[improve]
            hit |= ok
            if it == domain.max_iterations:
                break
            # d/dz of c * max(margin, -kappa)
            dz = np.zeros_like(trace.logits)
            on = (margin > -kappa) * const
            dz[rows, y] += on
            dz[rows, k] -= on
            gx = 2.0 * (x - x0) + diffnet.vjp(params, trace, dz, param_grads=False).input_grads
            gw = gx * (1.0 - np.tanh(w) ** 2) / 2.0
            t = it + 1
            m = beta1 * m + (1 - beta1) * gw
            v = beta2 * v + (1 - beta2) * gw * gw
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            w = w - domain.learning_rate * mhat / (np.sqrt(vhat) + adam_eps)
        upper = np.where(hit, np.minimum(upper, const), upper)
        lower = np.where(hit, lower, np.maximum(lower, const))
        bounded = upper < 1e9
        const = np.where(bounded, (lower + upper) / 2.0, const * 10.0)
    return _result(params, best_adv, y)


def msd(params: NetworkParams, batch: Batch, domain: Domain, init: str = "zero", seed: int = 0,
        restart: int = 0, sample_ids=None, on_iterate: Optional[Callable] = None) -> AttackResult:
    """Multi steepest descent: each iteration keeps the worst of the three PGD steps.

    ``on_iterate(t, x, chosen_norms)`` receives the iterate and, per sample,
    the norm whose candidate was kept.
    """
    if domain.kind != "MSD":
        raise ValueError(f"expected an MSD domain, got {domain.kind} ({domain.name})")
    tunings = [domain.component(p) for p in NORMS]
    x0 = diffnet._as_inputs(params, batch)
    y = batch.labels
    if init == "zero":
        x = x0.copy()
    elif init == "random":
        lin = domain.component("Linf")
        delta = random_delta(x0.shape, "Linf", lin.epsilon, seed, restart, sample_ids)
        for c in tunings[1:]:
            delta = project_ball(delta, c.norm, c.epsilon)
        x = _clamp(x0, delta)
    else:
        raise ValueError(f"init must be 'zero' or 'random', got {init!r}")
    rows = np.arange(len(y))
    for t in range(domain.n_iter):
        g, _ = diffnet.input_gradient(params, x, y)
        cands = np.stack([_pgd_candidate(x0, x, g, c.norm, c.epsilon, c.step_size) for c in tunings])
        losses = np.stack([diffnet.cross_entropy(diffnet.logits(params, c), y)[0] for c in cands])
        choice = np.argmax(losses, axis=0)
        x = cands[choice, rows]
        if on_iterate:
            on_iterate(t + 1, x, [NORMS[i] for i in choice])
    return _result(params, x, y)


def clean(params: NetworkParams, batch: Batch) -> AttackResult:
    x0 = diffnet._as_inputs(params, batch)
    return _result(params, x0.copy(), batch.labels)


def run_attack(params: NetworkParams, batch: Batch, domain: Domain, init: str = "zero",
               seed: int = 0, restart: int = 0, sample_ids=None) -> AttackResult:
    """Dispatch on ``domain.kind``; init/seed/restart only matter for PGD and MSD."""
    if domain.kind == "Clean":
        return clean(params, batch)
    if domain.kind == "FGSM":
        return fgsm(params, batch, domain.step_size)
    if domain.kind == "PGD":
        return pgd(params, batch, domain, init, seed, restart, sample_ids)
    if domain.kind == "MSD":
        return msd(params, batch, domain, init, seed, restart, sample_ids)
    if domain.kind == "DeepFool":
        return deepfool(params, batch, domain)
    if domain.kind == "CW2":
        return cw2(params, batch, domain)
    raise ValueError(f"unknown attack kind {domain.kind!r}")


class Attack:
    """Closure over (params, domain) used by :func:`perturb_with_restarts`."""

    def __init__(self, params: NetworkParams, domain: Domain):
        self.params = params
        self.domain = domain

    @property
    def randomized(self) -> bool:
        return self.domain.randomized

    def __call__(self, batch: Batch, init: str = "zero", seed: int = 0, restart: int = 0,
                 sample_ids=None) -> AttackResult:
        return run_attack(self.params, batch, self.domain, init, seed, restart, sample_ids)


def perturb_with_restarts(attack: Callable[..., AttackResult], batch: Batch, n_restarts: int,
                          seed: int, sample_ids=None) -> AttackResult:
    """Run ``attack`` from zero init, then ``n_restarts - 1`` random inits.

    Per sample the first successful restart wins, otherwise the one with the
    highest loss. Attacks whose ``randomized`` attribute is False always land
    on the same point, so they are run once.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    if not getattr(attack, "randomized", True):
        n_restarts = 1
    ids = _sample_ids(len(batch), sample_ids)
    best = attack(batch, init="zero", seed=seed, restart=0, sample_ids=ids)
    adv = best.adv_inputs.copy()
    loss = best.per_sample_loss.copy()
    done = best.success_mask.copy()
    for r in range(1, n_restarts):
        todo = np.flatnonzero(~done)
        if not len(todo):
            break
        res = attack(batch.subset(todo), init="random", seed=seed, restart=r, sample_ids=ids[todo])
        take = res.success_mask | (res.per_sample_loss > loss[todo])
        adv[todo[take]] = res.adv_inputs[take]
        loss[todo[take]] = res.per_sample_loss[take]
        done[todo] = res.success_mask
    return AttackResult(adv, done, loss)

