import csv
import json

import numpy as np
import pytest

from advrex import config, diffnet
from advrex.checkpoint import Checkpoint, save_checkpoint
from advrex.cli import main
from advrex.experiment import read_metrics

from conftest import tiny_config


def _write(cfg, path):
    path.write_text(config.dumps(cfg))
    return str(path)


def test_train_eval_attack_round(tmp_path, capsys):
    cfg_path = _write(tiny_config(tmp_path, epochs=2), tmp_path / "c.toml")
    assert main(["train", "--config", cfg_path]) == 0
    out = json.loads(capsys.readouterr().out)
    ckpt = tmp_path / "run" / "best.ckpt"
    assert ckpt.exists() and out["best_epoch"] in (1, 2)

    assert main(["eval", "--ckpt", str(ckpt), "--config", cfg_path, "--out", str(tmp_path / "e.csv")]) == 0
    rows = read_metrics(tmp_path / "e.csv")
    assert {r["split"] for r in rows} == {"test"}
    assert all(r["n_restarts"] == "2" for r in rows)
    names = {r["domain_or_ensemble"] for r in rows}
    assert {"clean", "Pinf", "ensemble:seen", "ensemble:all"} <= names

    assert main(["attack", "--ckpt", str(ckpt), "--domain", "Pinf", "--out", str(tmp_path / "atk"),
                 "--limit", "20"]) == 0
    adv = np.load(tmp_path / "atk" / "adv_inputs.npy")
    assert adv.shape == (20, 2) and adv.min() >= 0 and adv.max() <= 1
    with open(tmp_path / "atk" / "outcomes.csv") as f:
        out_rows = list(csv.DictReader(f))
    assert len(out_rows) == 20 and all(float(r["linf"]) <= 0.04 + 1e-9 for r in out_rows)


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('preset = "desk-small"\nepochs = 0\n')
    assert main(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "epochs" in err
    assert not (tmp_path / "runs").exists()


def test_show_config(capsys):
    assert main(["show-config", "--preset", "mnist-paper"]) == 0
    text = capsys.readouterr().out
    assert config.loads(text) == config.preset("mnist-paper")


def test_csv_is_byte_identical_across_runs(tmp_path):
    for sub in ("a", "b"):
        cfg_path = _write(tiny_config(tmp_path / sub, epochs=3), tmp_path / f"{sub}.toml")
        assert main(["train", "--config", cfg_path]) == 0
    assert (tmp_path / "a/run/metrics.csv").read_bytes() == (tmp_path / "b/run/metrics.csv").read_bytes()


def test_worker_flag_does_not_change_eval(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path, epochs=1, dataset={"n_test": 600})
    cfg_path = _write(cfg, tmp_path / "c.toml")
    main(["train", "--config", cfg_path])
    ckpt = str(tmp_path / "run" / "latest.ckpt")
    main(["--workers", "1", "eval", "--ckpt", ckpt, "--config", cfg_path, "--out", str(tmp_path / "1.csv")])
    monkeypatch.setenv("ADVREX_WORKERS", "3")
    main(["eval", "--ckpt", ckpt, "--config", cfg_path, "--out", str(tmp_path / "3.csv")])
    assert (tmp_path / "1.csv").read_bytes() == (tmp_path / "3.csv").read_bytes()


def test_sweep_beta_zero_matches_avg(tmp_path):
    base = dict(epochs=3, defense={"mode": "AVG_REX", "rex_activation_epoch": 1})
    sweep_cfg = tiny_config(tmp_path / "s", **base)
    assert main(["sweep", "--config", _write(sweep_cfg, tmp_path / "s.toml"), "--beta", "0,10"]) == 0
    avg_cfg = tiny_config(tmp_path / "avg", epochs=3, defense={"mode": "AVG"})
    assert main(["train", "--config", _write(avg_cfg, tmp_path / "avg.toml")]) == 0
    assert (tmp_path / "s/run/beta_0/metrics.csv").read_bytes() == (tmp_path / "avg/run/metrics.csv").read_bytes()
    with open(tmp_path / "s/run/sweep.csv") as f:
        f.readline()
        betas = {r["beta"] for r in csv.DictReader(f)}
    assert betas == {"0.0", "10.0"}
    rex = read_metrics(tmp_path / "s/run/beta_10/metrics.csv")
    assert rex != read_metrics(tmp_path / "s/run/beta_0/metrics.csv")


def test_eval_fresh_net_is_chance_level(tmp_path):
    cfg = config.preset("digits-proxy", output_dir=str(tmp_path / "run"),
                        dataset={"n_train": 100, "n_val": 100, "n_test": 1000},
                        defense={"seen": ["clean", "Pinf"]}, eval={"unseen": [], "report_only": []})
    cfg_path = _write(cfg, tmp_path / "c.toml")
    # one untrained net can sit anywhere in roughly [0.05, 0.17]; the mean over inits is chance
    accs = []
    for seed in range(5):
        params = diffnet.init_network(cfg.layer_sizes, seed=seed)
        save_checkpoint(tmp_path / "init.ckpt", Checkpoint(params, [], 0, cfg.hash()))
        assert main(["eval", "--ckpt", str(tmp_path / "init.ckpt"), "--config", cfg_path,
                     "--out", str(tmp_path / "e.csv")]) == 0
        accs.append({r["domain_or_ensemble"]: float(r["accuracy"]) for r in read_metrics(tmp_path / "e.csv")})
    assert np.mean([a["clean"] for a in accs]) == pytest.approx(0.10, abs=0.05)
    assert all(a["ensemble:seen"] <= a["clean"] for a in accs)


def test_attack_unknown_domain_exit_2(tmp_path, capsys):
    cfg_path = _write(tiny_config(tmp_path, epochs=1), tmp_path / "c.toml")
    main(["train", "--config", cfg_path])
    assert main(["attack", "--ckpt", str(tmp_path / "run/latest.ckpt"), "--domain", "nope",
                 "--out", str(tmp_path / "x")]) == 2
    assert "nope" in capsys.readouterr().err
