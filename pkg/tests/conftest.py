import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_net(rng, sizes):
    """Random weights and non-zero biases (init_network zeroes biases)."""
    from advrex.diffnet import NetworkParams

    ws = [rng.normal(0, 1 / np.sqrt(i), size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(0, 0.1, size=o) for o in sizes[1:]]
    return NetworkParams(ws, bs)


def kink_free_inputs(rng, params, n, margin=1e-3, tries=200):
    """Inputs in [0,1] whose hidden pre-activations all stay `margin` away from the ReLU kink."""
    from advrex import diffnet

    for _ in range(tries):
        x = rng.random((n, params.layer_sizes[0]))
        tr = diffnet.forward(params, x)
        if all(np.abs(z).min() > margin for z in tr.pre_activations[:-1]):
            return x
    pytest.skip("could not sample kink-free inputs")


def tiny_config(tmp_path, **over):
    """desk-small shrunk to a few seconds of work."""
    from advrex import config

    raw = {"preset": "desk-small", "epochs": 3, "output_dir": str(tmp_path / "run"),
           "dataset": {"n_train": 160, "n_val": 60, "n_test": 60},
           "layer_sizes": [2, 16, 2], "batch_size": 32,
           "eval": {"test_restarts": 2, "unseen_every": 2}}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    return config.from_dict(raw)


CRITERIA: list[str] = []


def record_criterion(label: str, ok, detail: str = ""):
    """Store one acceptance line; printed in the terminal summary and echoed to stdout."""
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"[{status}] {label}" + (f": {detail}" if detail else "")
    CRITERIA.append(line)
    print(line)
    return bool(ok) if not isinstance(ok, str) else True


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
