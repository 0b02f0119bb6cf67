"""Experiment configuration: YAML sections, dotted overrides and seed resolution.

Schema (all sections optional; defaults are a desk-scale synthetic run)::

    seed: 0
    output: runs/demo
    dataset:
      name: synthetic
      path: null            # interaction file; null selects the synthetic generator
      delimiter: "\\t"
      header: false
      columns: [user, item, rating, timestamp]
      strict: false
      synthetic: {num_users: 200, num_items: 300, num_interactions: 6000}
    split: {mode: last, seed: null}
    train: {epochs: 200, batch_size: 512, lr: 0.01, d: 64, seed: null,
            checkpoint_epochs: [100], l2_reg: 0.0}
    apr: {lambda: 1.0, epsilon_adv: 0.5, epochs: 100, warm_start_epoch: 100}
    perturbations:
      - {strategy: FGSM, epsilon: 0.5}
      - {strategy: BIM, epsilon: 0.5, iterations: 25}
      - {strategy: PGD, epsilon: 0.5, iterations: 25}
    eval: {k: 10}
    sweeps:
      iterations: [1, 5, 10, 25]
      epsilon: [0.001, 0.01, 0.1, 0.5, 1, 2, 5, 10]
      epsilon_iterations: 25
      kcore: [2, 3, 4, 6, 8]
      kcore_epochs: 200

Set ``apr: null`` to skip adversarial training.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from advrec.adversarial import AprConfig, PerturbationConfig, SampledBatch
from advrec.dataset import TsvSpec
from advrec.errors import ConfigurationError
from advrec.mf import TrainConfig

DEFAULTS = {
    "seed": 0,
    "output": "runs/default",
    "dataset": {
        "name": "synthetic",
        "path": None,
        "delimiter": "\t",
        "header": False,
        "columns": ["user", "item", "rating", "timestamp"],
        "strict": False,
        "synthetic": {"num_users": 200, "num_items": 300, "num_interactions": 6000},
    },
    "split": {"mode": "last", "seed": None},
    "train": {
        "epochs": 200,
        "batch_size": 512,
        "lr": 0.01,
        "d": 64,
        "seed": None,
        "checkpoint_epochs": [100],
        "l2_reg": 0.0,
    },
    "apr": {"lambda": 1.0, "epsilon_adv": 0.5, "epochs": 100, "warm_start_epoch": 100},
    "perturbations": [
        {"strategy": "FGSM", "epsilon": 0.5},
        {"strategy": "BIM", "epsilon": 0.5, "iterations": 25},
        {"strategy": "PGD", "epsilon": 0.5, "iterations": 25},
    ],
    "eval": {"k": 10},
    "sweeps": {
        "iterations": [1, 5, 10, 25],
        "epsilon": [0.001, 0.01, 0.1, 0.5, 1, 2, 5, 10],
        "epsilon_iterations": 25,
        "kcore": [2, 3, 4, 6, 8],
        "kcore_epochs": 200,
    },
}

_SECTIONS = set(DEFAULTS)


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(raw: dict, assignment: str):
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in _SECTIONS:
        raise ConfigurationError(f"unknown config section {parts[0]!r}")
    node = raw
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot override inside non-mapping {key!r}")
    node[parts[-1]] = yaml.safe_load(text)


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    output: Path
    dataset_name: str
    dataset_path: Path | None
    tsv: TsvSpec
    synthetic: dict
    split_mode: str
    split_seed: int
    train: TrainConfig
    apr: AprConfig | None
    perturbations: list = field(default_factory=list)
    k: int = 10
    sweep_iterations: list = field(default_factory=list)
    sweep_epsilon: list = field(default_factory=list)
    epsilon_iterations: int = 25
    sweep_kcore: list = field(default_factory=list)
    kcore_epochs: int = 200

    def config_hash(self):
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True)


def load_config(path=None, overrides=(), seed=None, output=None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be a mapping")
        unknown = set(raw) - _SECTIONS
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        if path is not None and raw.get("dataset", {}) and raw["dataset"].get("path"):
            p = Path(raw["dataset"]["path"])
            if not p.is_absolute():
                raw["dataset"]["path"] = str(Path(path).parent / p)
    raw = _merge(DEFAULTS, raw)
    if "perturbations" in raw and raw["perturbations"] is None:
        raw["perturbations"] = []
    for item in overrides:
        apply_override(raw, item)
    if seed is not None:
        raw["seed"] = int(seed)
    if output is not None:
        raw["output"] = str(output)
    return build_config(raw)


def build_config(raw: dict) -> ExperimentConfig:
    try:
        seed = int(raw["seed"])
        ds = raw["dataset"]
        path = Path(ds["path"]) if ds.get("path") else None
        if path is not None and not path.exists():
            raise ConfigurationError(f"dataset file {path} does not exist")
        tsv = TsvSpec(delimiter=ds["delimiter"], header=bool(ds["header"]),
                      columns=tuple(ds["columns"]), strict=bool(ds["strict"]))

        tr = dict(raw["train"])
        tr["seed"] = seed if tr.get("seed") is None else int(tr["seed"])
        train = TrainConfig(**tr)

        apr = None
        if raw.get("apr"):
            a = raw["apr"]
            apr = AprConfig(lam=float(a.get("lambda", 1.0)),
                            epsilon_adv=float(a.get("epsilon_adv", 0.5)),
                            epochs=int(a.get("epochs", 1000)),
                            warm_start_epoch=int(a.get("warm_start_epoch", 1000)))
            if not 1 <= apr.warm_start_epoch <= train.epochs:
                raise ConfigurationError("apr.warm_start_epoch must lie within the BPR epochs")

        perts = []
        for p in raw.get("perturbations") or []:
            p = dict(p)
            p.setdefault("seed", seed)
            lb = p.pop("loss_batch", "all")
            if isinstance(lb, dict):
                lb = SampledBatch(int(lb["count"]), int(lb.get("seed", seed)))
            perts.append(PerturbationConfig(loss_batch=lb, **p))

        sw = raw["sweeps"]
        split = raw["split"]
        cfg = ExperimentConfig(
            raw=raw,
            seed=seed,
            output=Path(raw["output"]),
            dataset_name=str(ds.get("name") or (path.stem if path else "synthetic")),
            dataset_path=path,
            tsv=tsv,
            synthetic=dict(ds.get("synthetic") or {}),
            split_mode=split["mode"],
            split_seed=seed if split.get("seed") is None else int(split["seed"]),
            train=train,
            apr=apr,
            perturbations=perts,
            k=int(raw["eval"]["k"]),
            sweep_iterations=[int(x) for x in sw.get("iterations") or []],
            sweep_epsilon=[float(x) for x in sw.get("epsilon") or []],
            epsilon_iterations=int(sw.get("epsilon_iterations", 25)),
            sweep_kcore=[int(x) for x in sw.get("kcore") or []],
            kcore_epochs=int(sw.get("kcore_epochs", 200)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid configuration: {exc}") from None
    if cfg.split_mode not in ("last", "random"):
        raise ConfigurationError("split.mode must be 'last' or 'random'")
    if cfg.k < 1:
        raise ConfigurationError("eval.k must be >= 1")
    return cfg
