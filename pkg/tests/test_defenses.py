import numpy as np
import pytest
from hypothesis import given, strategies as st

from advrex import diffnet
from advrex.attacks import CLEAN, Domain
from advrex.data import synthetic_dataset
from advrex.defenses import (DefenseConfig, InvalidStateError, NonFiniteGradientError, OptimState,
                             TrainerState, TrainingError, activate_rex, loss_avg, loss_max, loss_rex,
                             lr_at, objective_and_grads, objective_weights, perturb,
                             population_variance, sgd_step, train_epoch)
from advrex.diffnet import Batch, Gradients, NetworkParams

from conftest import kink_free_inputs, random_net
from oracles import central_diff, grad_close

PINF = Domain("Pinf", "PGD", "Linf", 0.1, 0.02, 5)
P2 = Domain("P2", "PGD", "L2", 0.3, 0.1, 5)
P1 = Domain("P1", "PGD", "L1", 0.6, 0.2, 5)
MSD = Domain("MSD", "MSD", n_iter=5, components=(PINF, P2, P1))


@pytest.fixture
def frozen(rng):
    p = random_net(rng, [4, 10, 3])
    b = Batch(rng.random((20, 4)), rng.integers(0, 3, 20))
    return p, b


def _fixed_advs(rng, b, k):
    return [b.inputs] + [np.clip(b.inputs + rng.normal(0, 0.1, b.inputs.shape), 0, 1) for _ in range(k - 1)]


# ---- losses ----

def test_loss_avg_single_domain_is_domain_mean(frozen):
    p, b = frozen
    total, per = loss_avg(p, b, [PINF])
    want = diffnet.cross_entropy(diffnet.logits(p, perturb(p, b, [PINF])[0]), b.labels)[1]
    assert total == pytest.approx(want, abs=1e-12) and per[0] == total


def test_loss_avg_clean_pinf_two_pass(frozen):
    p, b = frozen
    total, _ = loss_avg(p, b, [CLEAN, PINF])
    clean = diffnet.cross_entropy(diffnet.logits(p, b.inputs), b.labels)[1]
    from advrex.attacks import pgd
    adv = diffnet.cross_entropy(diffnet.logits(p, pgd(p, b, PINF).adv_inputs), b.labels)[1]
    assert total == pytest.approx((clean + adv) / 2, abs=1e-12)


def test_objective_weights_arithmetic():
    assert objective_weights(np.array([[1.0, 1.0], [3.0, 3.0]]), "avg")[0] == 2.0
    assert objective_weights(np.array([[1.0, 4.0], [3.0, 2.0]]), "max")[0] == 3.5
    assert objective_weights(np.array([[1.0, 1.0], [3.0, 3.0]]), "rex", beta=10)[0] == 12.0
    assert objective_weights(np.array([[1.0, 1.0], [3.0, 3.0]]), "rex", beta=0)[0] == 2.0
    assert objective_weights(np.array([[2.0, 1.0], [1.0, 2.0]]), "rex", beta=10)[0] == 1.5
    assert population_variance([1.0, 3.0]) == 1.0


def test_loss_max_single_domain(frozen):
    p, b = frozen
    assert loss_max(p, b, [PINF]) == pytest.approx(loss_avg(p, b, [PINF])[0], abs=1e-12)


@given(seed=st.integers(0, 10_000), k=st.integers(2, 4), beta=st.floats(0, 50))
def test_loss_orderings(seed, k, beta):
    r = np.random.default_rng(seed)
    p = random_net(r, [3, 6, 2])
    b = Batch(r.random((8, 3)), r.integers(0, 2, 8))
    advs = _fixed_advs(r, b, k)
    doms = [Domain(f"d{i}", "Clean") for i in range(k)]
    avg, per = loss_avg(p, b, doms, advs)
    mx = loss_max(p, b, doms, advs)
    assert mx >= avg - 1e-12 and avg >= 0
    rex, stats = loss_rex(p, b, doms, beta, advs)
    assert rex == pytest.approx(stats.avg_loss + beta * stats.variance_term, abs=1e-12)
    assert loss_rex(p, b, doms, 0.0, advs)[0] == avg
    assert loss_rex(p, b, doms, beta + 1.0, advs)[0] >= rex
    perm = r.permutation(k)
    _, s2 = loss_rex(p, b, [doms[i] for i in perm], beta, [advs[i] for i in perm])
    assert s2.variance_term == pytest.approx(stats.variance_term, abs=1e-14)


def test_loss_errors(frozen):
    p, b = frozen
    with pytest.raises(ValueError):
        loss_avg(p, b, [])
    with pytest.raises(ValueError):
        loss_max(p, b, [])
    with pytest.raises(ValueError):
        loss_rex(p, b, [CLEAN], 1.0)


def test_rex_equal_means_gives_avg(frozen):
    p, b = frozen
    total, stats = loss_rex(p, b, [CLEAN, Domain("c2", "Clean")], 10.0)
    assert stats.variance_term == 0.0 and total == stats.avg_loss


@pytest.mark.parametrize("kind,beta", [("avg", 0.0), ("max", 0.0), ("rex", 10.0), ("rex", 0.5)])
def test_objective_gradients_match_fd(rng, kind, beta):
    p = random_net(rng, [4, 8, 3])
    x = kink_free_inputs(rng, p, 6)
    b = Batch(x, rng.integers(0, 3, 6))
    advs = [x, np.clip(x + 0.05, 0, 1), np.clip(x - 0.05, 0, 1)]
    _, _, grads = objective_and_grads(p, b, advs, kind, beta)

    def obj():
        losses = np.stack([diffnet.cross_entropy(diffnet.logits(p, a), b.labels)[0] for a in advs])
        return objective_weights(losses, kind, beta)[0]

    for a, g in zip(p.arrays(), grads.param_arrays()):
        assert grad_close(g, central_diff(obj, a)).all()


# ---- optimizer ----

def _one_param(theta):
    return NetworkParams([np.array([[theta]])], [np.array([0.0])])


def _grad(g):
    return Gradients([np.array([[g]])], [np.array([0.0])], None)


def test_sgd_plain_step():
    opt = OptimState(0.1, momentum=0.0)
    out = sgd_step(opt, _one_param(1.0), _grad(2.0))
    assert out.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_second_step_magnitude():
    opt = OptimState(0.1, momentum=0.9)
    p0 = _one_param(0.0)
    p1 = sgd_step(opt, p0, _grad(1.0))
    p2 = sgd_step(opt, p1, _grad(1.0))
    assert p1.weights[0][0, 0] - p2.weights[0][0, 0] == pytest.approx(0.1 * 1.9, abs=1e-15)


def test_sgd_quadratic_recurrence():
    # f(t) = 0.5 * a * t^2, grad a*t, with weight decay on the weight
    a, lr, mu, wd = 2.0, 0.05, 0.9, 0.01
    opt = OptimState(lr, momentum=mu, weight_decay=wd)
    p = _one_param(1.5)
    t, v = 1.5, 0.0
    for _ in range(30):
        p = sgd_step(opt, p, _grad(a * p.weights[0][0, 0]))
        v = mu * v + (a * t + wd * t)
        t = t - lr * v
        assert p.weights[0][0, 0] == pytest.approx(t, abs=1e-12)


def test_sgd_weight_decay_skips_biases():
    opt = OptimState(0.1, momentum=0.0, weight_decay=0.5)
    p = NetworkParams([np.array([[1.0]])], [np.array([1.0])])
    out = sgd_step(opt, p, Gradients([np.zeros((1, 1))], [np.zeros(1)], None))
    assert out.weights[0][0, 0] == pytest.approx(0.95) and out.biases[0][0] == 1.0


def test_sgd_rejects_non_finite():
    with pytest.raises(NonFiniteGradientError):
        sgd_step(OptimState(0.1), _one_param(0.0), _grad(np.nan))


def test_lr_schedule():
    assert lr_at(OptimState(0.1), 500) == 0.1
    opt = OptimState(0.1, milestones=[(100, 0.01)])
    assert lr_at(opt, 99) == 0.1 and lr_at(opt, 100) == 0.01
    opt = OptimState(0.1, milestones=[(20, 0.001), (10, 0.01)])
    assert [lr_at(opt, e) for e in (9, 10, 19, 20)] == [0.1, 0.01, 0.01, 0.001]
    with pytest.raises(ValueError):
        OptimState(0.0)


# ---- config and REx protocol ----

def test_defense_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig([], "AVG")
    with pytest.raises(ValueError):
        DefenseConfig([CLEAN], "AVG_REX", rex_activation_epoch=0)
    DefenseConfig([CLEAN], "AVG")  # plain ERM
    with pytest.raises(ValueError):
        DefenseConfig([CLEAN, PINF], "AVG_REX")
    with pytest.raises(ValueError):
        DefenseConfig([CLEAN, PINF], "AVG", beta=-1)
    with pytest.raises(ValueError):
        DefenseConfig([PINF, P2], "MSD")
    with pytest.raises(ValueError):
        DefenseConfig([MSD], "MSD_REX", rex_activation_epoch=1)
    DefenseConfig([MSD], "MSD_REX", rex_activation_epoch=1, rex_domains=[PINF, P2, P1])


def _state(mode="AVG_REX", act=1, seed=0, domains=(CLEAN, PINF), **kw):
    p = diffnet.init_network([2, 16, 2], seed)
    extra = {"rex_domains": [PINF, P2, P1]} if mode == "MSD_REX" else {}
    d = DefenseConfig(list(domains), mode, beta=kw.pop("beta", 10.0),
                      rex_activation_epoch=act if mode.endswith("REX") else None, **extra)
    return TrainerState(p, OptimState(kw.pop("lr", 0.1)), d, seed=seed, batch_size=kw.pop("batch_size", 32))


@pytest.fixture(scope="module")
def moons():
    return synthetic_dataset("moons", 128, 0.1, seed=0)


def test_activate_rex_zeroes_velocity(moons):
    s = _state(act=1)
    train_epoch(s, moons)
    assert any(np.abs(v).max() > 0 for v in s.opt.velocity)
    activate_rex(s)
    assert s.rex_active and all((v == 0).all() for v in s.opt.velocity)
    with pytest.raises(InvalidStateError):
        activate_rex(s)


def test_activate_rex_requires_epoch_and_mode():
    with pytest.raises(InvalidStateError):
        activate_rex(_state(act=3))
    with pytest.raises(InvalidStateError):
        activate_rex(_state("AVG"))


def test_msd_rex_switches_domains(moons):
    s = _state("MSD_REX", act=1, domains=(MSD,))
    st0 = train_epoch(s, moons)
    assert list(st0.per_domain_mean_loss) == ["MSD"] and not st0.rex_active
    st1 = train_epoch(s, moons)
    assert st1.rex_active and list(st1.per_domain_mean_loss) == ["Pinf", "P2", "P1"]
    assert st1.total_loss == pytest.approx(st1.avg_loss + 10.0 * st1.variance_term, abs=1e-12)


def test_paired_run_before_activation_is_bit_identical(moons):
    a = _state("AVG", seed=3)
    b = _state("AVG_REX", act=10**9, seed=3)
    c = _state("AVG_REX", act=2, seed=3)
    for _ in range(3):
        sa, sb, sc = train_epoch(a, moons), train_epoch(b, moons), train_epoch(c, moons)
        assert sa.total_loss == sb.total_loss
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert x.tobytes() == y.tobytes()
    # the third epoch of c was the first REx epoch; its first two matched AVG
    assert sc.rex_active


def test_epoch_stats_total_identity(moons):
    s = _state("AVG_REX", act=0, beta=3.0)
    st_ = train_epoch(s, moons)
    assert st_.total_loss == pytest.approx(st_.avg_loss + 3.0 * st_.variance_term, abs=1e-12)
    m = _state("MAX", domains=(CLEAN, PINF, P2))
    sm = train_epoch(m, moons)
    assert sm.total_loss == sm.mean_batch_objective


def test_zero_lr_leaves_params(moons):
    s = _state("AVG", lr=1e-300)
    s.opt.learning_rate = 0.0
    before = [a.copy() for a in s.params.arrays()]
    train_epoch(s, moons)
    assert all((x == y).all() for x, y in zip(before, s.params.arrays()))


def test_train_epoch_deterministic(moons):
    a, b = _state(seed=5), _state(seed=5)
    assert train_epoch(a, moons) == train_epoch(b, moons)
    assert train_epoch(a, moons) == train_epoch(b, moons)


def test_erm_loss_decreases():
    data = synthetic_dataset("gaussians", 256, 0.2, seed=1)
    s = _state("AVG", domains=(CLEAN,))
    losses = [train_epoch(s, data).avg_loss for _ in range(10)]
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_error_carries_minibatch(moons):
    s = _state("AVG", lr=1e300)
    with pytest.raises(TrainingError) as e:
        for _ in range(3):
            train_epoch(s, moons)
    assert e.value.minibatch >= 0
    with pytest.raises(ValueError):
        train_epoch(_state(), Batch(np.zeros((0, 2)), np.zeros(0, dtype=int)))
