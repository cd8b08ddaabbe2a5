import json

import numpy as np
import pytest

from advrex import config, diffnet
from advrex.checkpoint import Checkpoint, CheckpointError, MAGIC, load_checkpoint, save_checkpoint
from advrex.config import ConfigError
from advrex.experiment import read_metrics, train

from conftest import random_net, tiny_config


def _ckpt(rng):
    p = random_net(rng, [3, 5, 2])
    return Checkpoint(p, [rng.normal(size=a.shape) for a in p.arrays()], 7, "abc", True,
                      {"seed": 1}, "x = 1\n")


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    c = _ckpt(rng)
    save_checkpoint(tmp_path / "c.ckpt", c)
    back = load_checkpoint(tmp_path / "c.ckpt", [3, 5, 2])
    for a, b in zip(c.params.arrays() + c.velocity, back.params.arrays() + back.velocity):
        assert a.tobytes() == b.tobytes()
    assert (back.epoch, back.config_hash, back.rex_active, back.rng_state, back.config_text) == \
        (7, "abc", True, {"seed": 1}, "x = 1\n")
    assert (tmp_path / "c.ckpt").read_bytes().startswith(MAGIC)


def test_checkpoint_errors(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, _ckpt(rng))
    with pytest.raises(CheckpointError, match="layer_sizes"):
        load_checkpoint(path, [3, 6, 2])
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "flip").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "flip")
    (tmp_path / "short").write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")
    text = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "ver").write_bytes(text)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver")
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")


# ---- config ----

@pytest.mark.parametrize("name", sorted(config.PRESETS))
def test_preset_round_trip(name):
    cfg = config.preset(name)
    again = config.loads(config.dumps(cfg))
    assert again == cfg
    assert config.dumps(again) == config.dumps(cfg)
    assert again.hash() == cfg.hash()


def test_mnist_preset_tunings():
    cfg = config.preset("mnist-paper")
    assert cfg.domain("Pinf") == cfg.domain("Pinf").__class__("Pinf", "PGD", "Linf", 0.3, 0.01, 40)
    assert (cfg.domain("P1").epsilon, cfg.domain("P1").step_size) == (10.0, 0.5)
    assert (cfg.domain("P2").epsilon, cfg.domain("P2").step_size) == (2.0, 0.1)
    assert (cfg.domain("DFinf").epsilon, cfg.domain("DFinf").n_iter) == (0.11, 30)
    cw = cfg.domain("CW2")
    assert (cw.max_iterations, cw.learning_rate, cw.binary_search_steps) == (20, 0.1, 5)
    assert cfg.layer_sizes == [784, 512, 512, 10] and cfg.defense.beta == 10.0


def test_validation_reports_field_paths():
    with pytest.raises(ConfigError) as e:
        config.from_dict({"preset": "desk-small", "epochs": 0, "defense": {"seen": ["clean", "nope"]},
                          "domains": {"bad": {"kind": "PGD", "norm": "L2", "epsilon": -1, "step_size": 1,
                                              "n_iter": 1}},
                          "eval": {"colour": 1}})
    msg = "\n".join(e.value.problems)
    assert "eval.colour: unknown field" in msg
    with pytest.raises(ConfigError) as e:
        config.from_dict({"preset": "desk-small", "epochs": 0, "defense": {"seen": ["clean", "nope"]},
                          "domains": {"bad": {"kind": "PGD", "norm": "L2", "epsilon": -1, "step_size": 1,
                                              "n_iter": 1}}})
    msg = "\n".join(e.value.problems)
    assert "epochs" in msg and "defense.seen[1]" in msg and "domains.bad" in msg


def test_validation_rejects_bad_rex_setup():
    with pytest.raises(ConfigError, match="rex_activation_epoch"):
        config.preset("desk-small", defense={"mode": "AVG_REX"})
    with pytest.raises(ConfigError, match="preset"):
        config.from_dict({"preset": "cifar"})
    with pytest.raises(ConfigError):
        config.loads("epochs = [")


def test_hash_ignores_bookkeeping():
    a = config.preset("desk-small")
    b = config.preset("desk-small", epochs=99, output_dir="elsewhere", workers=4)
    assert a.hash() == b.hash()
    assert a.hash() != config.preset("desk-small", seed=1).hash()


# ---- resume ----

def test_resume_matches_uninterrupted(tmp_path):
    full = tiny_config(tmp_path / "a", epochs=5, defense={"mode": "AVG_REX", "rex_activation_epoch": 2})
    ref = train(full)
    part = tiny_config(tmp_path / "b", epochs=3, defense={"mode": "AVG_REX", "rex_activation_epoch": 2})
    train(part)
    resumed_cfg = tiny_config(tmp_path / "b", epochs=5, defense={"mode": "AVG_REX", "rex_activation_epoch": 2})
    res = train(resumed_cfg, resume=tmp_path / "b" / "run" / "latest.ckpt")
    a = [s.total_loss for s in ref.stats][3:]
    b = [s.total_loss for s in res.stats]
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    for x, y in zip(ref.state.params.arrays(), res.state.params.arrays()):
        assert x.tobytes() == y.tobytes()
    # the interrupted run also evaluated unseen domains at its last epoch, so compare train rows only
    def train_part(p):
        return [r for r in read_metrics(p) if r["split"] == "train"]

    assert train_part(tmp_path / "a/run/metrics.csv") == train_part(tmp_path / "b/run/metrics.csv")


def test_resume_refuses_other_config(tmp_path):
    cfg = tiny_config(tmp_path, epochs=1)
    train(cfg)
    other = tiny_config(tmp_path, epochs=2, seed=9)
    with pytest.raises(CheckpointError, match="hash"):
        train(other, resume=tmp_path / "run" / "latest.ckpt")
    train(other, resume=tmp_path / "run" / "latest.ckpt", force=True)


def test_metrics_schema(tmp_path):
    res = train(tiny_config(tmp_path, epochs=2))
    text = (res.out_dir / "metrics.csv").read_text().splitlines()
    assert text[0] == "# advrex-metrics v1"
    assert text[1] == "epoch,split,domain_or_ensemble,accuracy,mean_loss,n_restarts,seed"
    rows = read_metrics(res.out_dir / "metrics.csv")
    keys = [(r["epoch"], r["split"], r["domain_or_ensemble"]) for r in rows]
    assert len(keys) == len(set(keys))
    assert {"ensemble:seen", "ensemble:unseen", "ensemble:all"} <= {k[2] for k in keys if k[1] == "val"}
    summary = json.loads((res.out_dir / "summary.json").read_text())
    assert summary["epochs"] == 2 and summary["best_epoch"] in (1, 2)
    assert load_checkpoint(res.out_dir / "best.ckpt").epoch == summary["best_epoch"]
