"""Experiment configuration: dataclasses, TOML round-trip, presets, validation.

A config file is TOML. It may name a ``preset``; the file's tables are then
deep-merged over the preset. Domains are declared once under ``[domains.<name>]``
and referenced by name everywhere else.

    preset = "mnist-paper"
    epochs = 400
    [defense]
    mode = "AVG_REX"
    rex_activation_epoch = 200
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import tomlkit

from .attacks import Domain
from .defenses import MODES, DefenseConfig, OptimState
from .evalharness import DomainSet

DATASET_KINDS = ("mnist", "gaussians", "moons", "digits")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class DatasetConfig:
    kind: str = "mnist"
    path: str = "data/mnist"
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 1000
    noise: float = 0.1


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: list[list[float]] = field(default_factory=list)  # [[epoch, lr], ...]


@dataclass
class DefenseSection:
    mode: str = "AVG"
    seen: list[str] = field(default_factory=list)
    beta: float = 10.0
    rex_activation_epoch: Optional[int] = None
    rex_domains: list[str] = field(default_factory=list)


@dataclass
class EvalConfig:
    seen: list[str] = field(default_factory=list)  # empty -> the defense's seen domains
    unseen: list[str] = field(default_factory=list)
    report_only: list[str] = field(default_factory=list)  # evaluated, kept out of ensembles
    every: int = 1
    unseen_every: int = 5
    val_restarts: int = 1
    test_restarts: int = 10


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    layer_sizes: list[int] = field(default_factory=lambda: [784, 512, 512, 10])
    defense: DefenseSection = field(default_factory=DefenseSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    domains: dict[str, dict[str, Any]] = field(default_factory=dict)
    epochs: int = 1
    batch_size: int = 128
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    workers: int = 1

    # --- derived objects -----------------------------------------------------

    def domain(self, name: str) -> Domain:
        spec = dict(self.domains[name])
        kind = spec.pop("kind")
        comps = spec.pop("components", [])
        return Domain(name=name, kind=kind, components=tuple(self.domain(c) for c in comps), **spec)

    def defense_config(self) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(
            seen_domains=[self.domain(n) for n in d.seen], mode=d.mode, beta=d.beta,
            rex_activation_epoch=d.rex_activation_epoch,
            rex_domains=[self.domain(n) for n in d.rex_domains])

    def optim_state(self) -> OptimState:
        o = self.optimizer
        return OptimState(o.learning_rate, o.momentum, o.weight_decay,
                          [(int(e), float(lr)) for e, lr in o.milestones])

    def seen_eval_names(self) -> list[str]:
        if self.eval.seen:
            return list(self.eval.seen)
        names = []
        for n in self.defense.seen:
            spec = self.domains[n]
            names += spec.get("components", []) if spec["kind"] == "MSD" else [n]
        return names

    def domain_sets(self, n_restarts: int, include_unseen: bool = True) -> list[DomainSet]:
        seen = [self.domain(n) for n in self.seen_eval_names()]
        sets = [DomainSet("seen", tuple(seen), n_restarts)]
        if include_unseen and self.eval.unseen:
            unseen = [self.domain(n) for n in self.eval.unseen]
            sets.append(DomainSet("unseen", tuple(unseen), n_restarts))
            sets.append(DomainSet("all", tuple(seen + [u for u in unseen if u not in seen]), n_restarts))
        return sets

    def report_only_domains(self) -> list[Domain]:
        return [self.domain(n) for n in self.eval.report_only]

    def hash(self) -> str:
        """Digest of everything that shapes the training trajectory."""
        d = to_dict(self)
        for k in ("epochs", "output_dir", "workers", "eval", "checkpoint_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --- presets -----------------------------------------------------------------

def _pgd(norm, eps, step, n_iter=40):
    return {"kind": "PGD", "norm": norm, "epsilon": eps, "step_size": step, "n_iter": n_iter}


MNIST_DOMAINS = {
    "clean": {"kind": "Clean"},
    "P1": _pgd("L1", 10.0, 0.5),
    "P2": _pgd("L2", 2.0, 0.1),
    "Pinf": _pgd("Linf", 0.3, 0.01),
    "DFinf": {"kind": "DeepFool", "epsilon": 0.11, "n_iter": 30},
    "CW2": {"kind": "CW2", "max_iterations": 20, "learning_rate": 0.1, "binary_search_steps": 5},
    "Pinf_strong": _pgd("Linf", 0.4, 0.033),
    "DFinf_strong": {"kind": "DeepFool", "epsilon": 0.4, "n_iter": 50},
    "CW2_strong": {"kind": "CW2", "max_iterations": 30, "learning_rate": 0.12, "binary_search_steps": 7},
    "MSD": {"kind": "MSD", "n_iter": 40, "components": ["Pinf", "P2", "P1"]},
}

PRESETS: dict[str, dict[str, Any]] = {
    "mnist-paper": {
        "dataset": {"kind": "mnist", "path": "data/mnist", "n_train": 5000, "n_val": 1000, "n_test": 1000},
        "layer_sizes": [784, 512, 512, 10],
        "defense": {"mode": "AVG", "seen": ["clean", "P1", "P2", "Pinf"], "beta": 10.0},
        "optimizer": {"learning_rate": 0.01, "momentum": 0.9, "weight_decay": 0.0},
        "eval": {"unseen": ["DFinf_strong", "CW2_strong"], "report_only": ["DFinf", "CW2", "Pinf_strong"],
                 "every": 1, "unseen_every": 5, "val_restarts": 1, "test_restarts": 10},
        "domains": MNIST_DOMAINS,
        "epochs": 300,
        "batch_size": 128,
    },
    "desk-small": {
        "dataset": {"kind": "moons", "n_train": 1000, "n_val": 300, "n_test": 300, "noise": 0.1},
        "layer_sizes": [2, 50, 50, 2],
        "defense": {"mode": "AVG", "seen": ["clean", "P1", "P2", "Pinf"], "beta": 10.0},
        "optimizer": {"learning_rate": 0.05, "momentum": 0.9},
        "eval": {"unseen": ["Pinf_strong", "DFinf"], "every": 1, "unseen_every": 5,
                 "val_restarts": 1, "test_restarts": 10},
        "domains": {
            "clean": {"kind": "Clean"},
            "P1": _pgd("L1", 0.08, 0.02, 10),
            "P2": _pgd("L2", 0.06, 0.015, 10),
            "Pinf": _pgd("Linf", 0.04, 0.01, 10),
            "Pinf_strong": _pgd("Linf", 0.08, 0.01, 20),
            "DFinf": {"kind": "DeepFool", "epsilon": 0.06, "n_iter": 20},
            "CW2": {"kind": "CW2", "max_iterations": 20, "learning_rate": 0.05, "binary_search_steps": 5},
            "MSD": {"kind": "MSD", "n_iter": 10, "components": ["Pinf", "P2", "P1"]},
        },
        "epochs": 50,
        "batch_size": 128,
    },
    "digits-proxy": {
        "dataset": {"kind": "digits", "n_train": 1000, "n_val": 397, "n_test": 400},
        "layer_sizes": [64, 128, 128, 10],
        "defense": {"mode": "AVG", "seen": ["clean", "P1", "P2", "Pinf"], "beta": 10.0},
        "optimizer": {"learning_rate": 0.01, "momentum": 0.9},
        "eval": {"unseen": ["Pinf_strong", "DFinf_strong", "CW2_strong"], "report_only": ["DFinf", "CW2"],
                 "every": 1, "unseen_every": 5, "val_restarts": 1, "test_restarts": 10},
        "domains": {
            "clean": {"kind": "Clean"},
            "P1": _pgd("L1", 3.0, 0.5, 20),
            "P2": _pgd("L2", 1.0, 0.1, 20),
            "Pinf": _pgd("Linf", 0.15, 0.01, 20),
            "DFinf": {"kind": "DeepFool", "epsilon": 0.11, "n_iter": 30},
            "CW2": {"kind": "CW2", "max_iterations": 20, "learning_rate": 0.1, "binary_search_steps": 5},
            "Pinf_strong": _pgd("Linf", 0.25, 0.02, 40),
            "DFinf_strong": {"kind": "DeepFool", "epsilon": 0.25, "n_iter": 50},
            "CW2_strong": {"kind": "CW2", "max_iterations": 30, "learning_rate": 0.12, "binary_search_steps": 7},
            "MSD": {"kind": "MSD", "n_iter": 20, "components": ["Pinf", "P2", "P1"]},
        },
        "epochs": 300,
        "batch_size": 128,
    },
}


# --- (de)serialization -------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k == "domains" and isinstance(v, dict):
            # domain tables replace wholesale so stale keys of another kind cannot leak in
            out.setdefault(k, {}).update(copy.deepcopy(v))
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


_SECTIONS = {"dataset": DatasetConfig, "defense": DefenseSection, "optimizer": OptimizerConfig,
             "eval": EvalConfig}


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; every problem is reported with its field path."""
    raw = dict(raw)
    problems: list[str] = []
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"preset: unknown preset {preset!r} (known: {sorted(PRESETS)})"])
        raw = _merge(PRESETS[preset], raw)
    kwargs: dict[str, Any] = {}
    top = {f for f in ExperimentConfig.__dataclass_fields__}
    for key, value in raw.items():
        if key not in top:
            problems.append(f"{key}: unknown field")
        elif key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a table")
                continue
            unknown = set(value) - set(cls.__dataclass_fields__)
            problems += [f"{key}.{u}: unknown field" for u in sorted(unknown)]
            kwargs[key] = cls(**{k: v for k, v in value.items() if k not in unknown})
        else:
            kwargs[key] = value
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def _validate_domain(name: str, spec: Any, all_specs: dict, problems: list[str]):
    path = f"domains.{name}"
    if not isinstance(spec, dict) or "kind" not in spec:
        problems.append(f"{path}: needs a 'kind'")
        return
    known = set(Domain.__dataclass_fields__) - {"name"}
    mine = [f"{path}.{k}: unknown field" for k in sorted(set(spec) - known)]
    mine += [f"{path}.components: unknown domain {c!r}"
             for c in spec.get("components", []) if c not in all_specs]
    if mine:
        problems += mine
        return
    comps = tuple(
        Domain(name=c, **{k: v for k, v in all_specs[c].items() if k != "components"})
        for c in spec.get("components", []) if isinstance(all_specs.get(c), dict) and "kind" in all_specs[c]
    )
    try:
        Domain(name=name, components=comps, **{k: v for k, v in spec.items() if k != "components"})
    except (ValueError, TypeError) as e:
        problems.append(f"{path}: {e}")


def validate(cfg: ExperimentConfig):
    problems: list[str] = []
    for name, spec in cfg.domains.items():
        _validate_domain(name, spec, cfg.domains, problems)

    def refs(path, names):
        for i, n in enumerate(names):
            if n not in cfg.domains:
                problems.append(f"{path}[{i}]: unknown domain {n!r}")

    refs("defense.seen", cfg.defense.seen)
    refs("defense.rex_domains", cfg.defense.rex_domains)
    refs("eval.seen", cfg.eval.seen)
    refs("eval.unseen", cfg.eval.unseen)
    refs("eval.report_only", cfg.eval.report_only)
    if cfg.dataset.kind not in DATASET_KINDS:
        problems.append(f"dataset.kind: must be one of {DATASET_KINDS}")
    for f in ("n_train", "n_val", "n_test"):
        if getattr(cfg.dataset, f) < 1:
            problems.append(f"dataset.{f}: must be >= 1")
    if not isinstance(cfg.epochs, int) or cfg.epochs < 1:
        problems.append("epochs: must be an integer >= 1")
    if cfg.batch_size < 1:
        problems.append("batch_size: must be >= 1")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        problems.append("seed: must be a non-negative integer")
    if len(cfg.layer_sizes) < 2 or any((not isinstance(s, int)) or s < 1 for s in cfg.layer_sizes):
        problems.append("layer_sizes: needs >= 2 positive integers")
    if cfg.defense.mode not in MODES:
        problems.append(f"defense.mode: must be one of {MODES}")
    if cfg.optimizer.learning_rate <= 0:
        problems.append("optimizer.learning_rate: must be > 0")
    for i, m in enumerate(cfg.optimizer.milestones):
        if len(m) != 2:
            problems.append(f"optimizer.milestones[{i}]: expected [epoch, lr]")
    if cfg.eval.every < 1 or cfg.eval.unseen_every < 1:
        problems.append("eval.every / eval.unseen_every: must be >= 1")
    if cfg.eval.val_restarts < 1 or cfg.eval.test_restarts < 1:
        problems.append("eval restarts: must be >= 1")
    if cfg.workers < 1:
        problems.append("workers: must be >= 1")
    if not problems:
        try:
            cfg.defense_config()
        except ValueError as e:
            problems.append(f"defense: {e}")
    if problems:
        raise ConfigError(problems)


def to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    if d["defense"]["rex_activation_epoch"] is None:
        del d["defense"]["rex_activation_epoch"]
    return d


def dumps(cfg: ExperimentConfig) -> str:
    return tomlkit.dumps(to_dict(cfg))


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomlkit.parse(text).unwrap()
    except Exception as e:  # tomlkit raises a family of parse errors
        raise ConfigError([f"<toml>: {e}"]) from e
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def preset(name: str, **overrides) -> ExperimentConfig:
    return from_dict({"preset": name, **overrides})
