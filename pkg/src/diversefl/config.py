"""Experiment configuration: parsing, validation, canonical form.

A config is a JSON document. Unknown keys are rejected so typos surface as
validation errors instead of silently falling back to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

from .enclave import Thresholds
from .errors import ConfigError
from .faults import FAULT_KINDS
from .robust import RULES

DATASET_KINDS = ("synthetic", "idx", "csv")


@dataclass(frozen=True)
class Warmup:
    start: float
    end: float
    rounds: int


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.06
    warmup: Optional[Warmup] = None
    steps: Tuple[Tuple[int, float], ...] = ()

    def lr_at(self, round_idx: int) -> float:
        """Learning rate for 1-based round ``round_idx``."""
        if self.warmup is not None:
            w = self.warmup
            if round_idx <= w.rounds:
                frac = (round_idx - 1) / max(w.rounds - 1, 1)
                base = w.start + (w.end - w.start) * frac
            else:
                base = w.end
        else:
            base = self.initial
        for at, factor in self.steps:
            if round_idx >= at:
                base *= factor
        return base


@dataclass(frozen=True)
class FaultConfig:
    kind: str = "none"
    sigma: float = 10.0
    ids: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "sorted"
    k: int = 2


@dataclass(frozen=True)
class ModelConfig:
    hidden: Tuple[int, ...] = (200, 200)
    init_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Dict[str, Any]
    num_clients: int = 23
    num_faulty: int = 0
    rounds: int = 1000
    local_steps: int = 1
    client_fraction: float = 1.0
    batch_fraction: float = 0.1
    lr: LrSchedule = LrSchedule()
    l2: float = 0.0005
    sample_rate: float = 0.01
    rule: str = "diversefl"
    faults: FaultConfig = FaultConfig()
    thresholds: Thresholds = Thresholds()
    partition: PartitionConfig = PartitionConfig()
    model: ModelConfig = ModelConfig()
    seed: int = 0
    eval_every: int = 1
    resampling_group: int = 2
    root_rate: float = 0.01
    trace_similarity: bool = False
    metrics_warmup: int = 50
    max_anomaly_fraction: float = 0.05

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["lr"]["steps"] = [list(s) for s in self.lr.steps]
        out["model"]["hidden"] = list(self.model.hidden)
        out["faults"]["ids"] = None if self.faults.ids is None else list(self.faults.ids)
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_override(self, path: str, value) -> "ExperimentConfig":
        """Copy with one (possibly dotted) field replaced, re-validated."""
        raw = self.to_dict()
        node = raw
        parts = path.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError([f"{path}: not a config section"])
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError([f"{path}: unknown field"])
        node[parts[-1]] = value
        if path == "num_faulty":
            raw["faults"]["ids"] = None
        return parse_config(raw)


# scalar fields a sweep may vary
SWEEPABLE = (
    "num_clients", "num_faulty", "rounds", "local_steps", "client_fraction",
    "batch_fraction", "l2", "sample_rate", "rule", "seed", "resampling_group",
    "root_rate", "lr.initial", "faults.kind", "faults.sigma", "partition.mode",
    "partition.k", "thresholds.eps1", "thresholds.eps2", "thresholds.eps3",
    "model.init_seed", "dataset.spread",
)
SWEEP_ALIASES = {"f": "num_faulty", "N": "num_clients", "E": "local_steps", "R": "rounds"}


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


class _Checker:
    def __init__(self):
        self.problems: List[str] = []

    def need(self, ok: bool, message: str):
        if not ok:
            self.problems.append(message)
        return ok


def _unknown(section: Dict[str, Any], allowed, prefix: str, chk: _Checker):
    for key in sorted(set(section) - set(allowed)):
        chk.need(False, f"{prefix}{key}: unknown field")


def _parse_dataset(raw, chk: _Checker) -> Dict[str, Any]:
    if not chk.need(isinstance(raw, dict), "dataset: must be an object"):
        return {}
    kind = raw.get("kind")
    if not chk.need(kind in DATASET_KINDS, f"dataset.kind: must be one of {DATASET_KINDS}"):
        return dict(raw)
    if kind == "synthetic":
        ds = {"kind": "synthetic", "num_classes": 10, "input_dim": 784, "train_per_class": 1000,
              "test_per_class": 200, "spread": 1.0, "mean_scale": 1.0, "seed": 0}
        _unknown(raw, ds, "dataset.", chk)
        ds.update({k: v for k, v in raw.items() if k in ds})
        for key in ("num_classes", "input_dim", "train_per_class", "test_per_class", "seed"):
            chk.need(_int(ds[key]) and ds[key] >= (0 if key == "seed" else 1), f"dataset.{key}: must be a positive integer")
        chk.need(_int(ds["num_classes"]) and ds["num_classes"] >= 2, "dataset.num_classes: must be at least 2")
        for key in ("spread", "mean_scale"):
            chk.need(_num(ds[key]) and ds[key] >= 0, f"dataset.{key}: must be a non-negative number")
        return ds
    if kind == "idx":
        ds = {"kind": "idx", "train_images": None, "train_labels": None, "test_images": None,
              "test_labels": None, "num_classes": 10}
    else:
        ds = {"kind": "csv", "train": None, "test": None, "num_classes": None}
    _unknown(raw, ds, "dataset.", chk)
    ds.update({k: v for k, v in raw.items() if k in ds})
    for key, value in ds.items():
        if key in ("kind", "num_classes"):
            continue
        chk.need(isinstance(value, str) and value, f"dataset.{key}: path required")
    return ds


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a config mapping; raises ConfigError listing every bad field."""
    chk = _Checker()
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    raw = copy.deepcopy(raw)
    top = {f.name for f in fields(ExperimentConfig)}
    _unknown(raw, top, "", chk)
    chk.need("dataset" in raw, "dataset: required")
    dataset = _parse_dataset(raw.get("dataset", {}), chk)

    defaults = ExperimentConfig(dataset={})
    vals = {f.name: raw.get(f.name, getattr(defaults, f.name)) for f in fields(ExperimentConfig)
            if f.name not in ("dataset", "lr", "faults", "thresholds", "partition", "model")}

    for key in ("num_clients", "rounds", "local_steps", "eval_every", "resampling_group"):
        chk.need(_int(vals[key]) and vals[key] >= 1, f"{key}: must be a positive integer")
    for key in ("num_faulty", "seed", "metrics_warmup"):
        chk.need(_int(vals[key]) and vals[key] >= 0, f"{key}: must be a non-negative integer")
    for key in ("client_fraction", "batch_fraction", "sample_rate", "root_rate"):
        chk.need(_num(vals[key]) and 0 < vals[key] <= 1, f"{key}: must lie in (0, 1]")
    chk.need(_num(vals["l2"]) and vals["l2"] >= 0, "l2: must be a non-negative number")
    chk.need(_num(vals["max_anomaly_fraction"]) and 0 <= vals["max_anomaly_fraction"] <= 1,
             "max_anomaly_fraction: must lie in [0, 1]")
    chk.need(isinstance(vals["trace_similarity"], bool), "trace_similarity: must be true or false")
    chk.need(vals["rule"] in RULES, f"rule: must be one of {RULES}")
    if _int(vals["num_faulty"]) and _int(vals["num_clients"]):
        chk.need(vals["num_faulty"] <= vals["num_clients"], "f: num_faulty must not exceed num_clients")

    # learning-rate schedule
    lr_raw = raw.get("lr", {})
    lr = LrSchedule()
    if chk.need(isinstance(lr_raw, dict), "lr: must be an object"):
        _unknown(lr_raw, ("initial", "warmup", "steps"), "lr.", chk)
        initial = lr_raw.get("initial", lr.initial)
        chk.need(_num(initial) and initial > 0, "lr.initial: must be positive")
        warm = lr_raw.get("warmup")
        warmup = None
        if warm is not None:
            if chk.need(isinstance(warm, dict) and set(warm) == {"start", "end", "rounds"},
                        "lr.warmup: needs exactly start, end, rounds"):
                ok = chk.need(_num(warm["start"]) and warm["start"] > 0 and _num(warm["end"]) and warm["end"] > 0,
                              "lr.warmup: start and end must be positive")
                ok &= chk.need(_int(warm["rounds"]) and warm["rounds"] >= 1, "lr.warmup.rounds: must be a positive integer")
                if ok:
                    warmup = Warmup(float(warm["start"]), float(warm["end"]), warm["rounds"])
        steps = []
        for item in lr_raw.get("steps", []):
            if chk.need(isinstance(item, (list, tuple)) and len(item) == 2 and _int(item[0]) and item[0] >= 1
                        and _num(item[1]) and item[1] > 0, f"lr.steps: bad entry {item!r}; want [round, factor>0]"):
                steps.append((int(item[0]), float(item[1])))
        if _num(initial) and initial > 0:
            lr = LrSchedule(float(initial), warmup, tuple(sorted(steps)))

    # faults
    f_raw = raw.get("faults", {})
    faults = FaultConfig()
    if chk.need(isinstance(f_raw, dict), "faults: must be an object"):
        _unknown(f_raw, ("kind", "sigma", "ids"), "faults.", chk)
        kind = f_raw.get("kind", "none")
        sigma = f_raw.get("sigma", 10.0)
        ids = f_raw.get("ids")
        chk.need(kind in FAULT_KINDS, f"faults.kind: must be one of {FAULT_KINDS}")
        chk.need(_num(sigma) and sigma > 0, "faults.sigma: must be positive")
        if ids is not None:
            if chk.need(isinstance(ids, list) and all(_int(i) for i in ids), "faults.ids: must be a list of integers"):
                n = vals["num_clients"]
                chk.need(len(set(ids)) == len(ids), "faults.ids: duplicate ids")
                if _int(n):
                    chk.need(all(0 <= i < n for i in ids), "faults.ids: ids must lie in [0, num_clients)")
                chk.need(len(ids) == vals["num_faulty"], "faults.ids: length must equal num_faulty")
                ids = tuple(sorted(ids))
        faults = FaultConfig(kind, float(sigma) if _num(sigma) else 10.0, ids if isinstance(ids, tuple) else None)

    th_raw = raw.get("thresholds", {})
    thresholds = Thresholds()
    if chk.need(isinstance(th_raw, dict), "thresholds: must be an object"):
        _unknown(th_raw, ("eps1", "eps2", "eps3"), "thresholds.", chk)
        eps = {k: th_raw.get(k, getattr(thresholds, k)) for k in ("eps1", "eps2", "eps3")}
        if chk.need(all(_num(v) for v in eps.values()), "thresholds: values must be numbers"):
            if chk.need(eps["eps2"] > 0 and eps["eps2"] < eps["eps3"], "thresholds: need 0 < eps2 < eps3"):
                thresholds = Thresholds(*(float(eps[k]) for k in ("eps1", "eps2", "eps3")))

    p_raw = raw.get("partition", {})
    partition = PartitionConfig()
    if chk.need(isinstance(p_raw, dict), "partition: must be an object"):
        _unknown(p_raw, ("mode", "k"), "partition.", chk)
        mode = p_raw.get("mode", "sorted")
        k = p_raw.get("k", 2)
        chk.need(mode in ("sorted", "shards"), "partition.mode: must be 'sorted' or 'shards'")
        chk.need(_int(k) and k >= 1, "partition.k: must be a positive integer")
        partition = PartitionConfig(mode, k)

    m_raw = raw.get("model", {})
    model = ModelConfig()
    if chk.need(isinstance(m_raw, dict), "model: must be an object"):
        _unknown(m_raw, ("hidden", "init_seed"), "model.", chk)
        hidden = m_raw.get("hidden", list(model.hidden))
        init_seed = m_raw.get("init_seed", 0)
        chk.need(isinstance(hidden, list) and all(_int(h) and h >= 1 for h in hidden),
                 "model.hidden: must be a list of positive integers")
        chk.need(_int(init_seed) and init_seed >= 0, "model.init_seed: must be a non-negative integer")
        if isinstance(hidden, list):
            model = ModelConfig(tuple(hidden), init_seed)

    if vals["rule"] == "bulyan" and _int(vals["num_clients"]) and _int(vals["num_faulty"]) and _num(vals["client_fraction"]):
        selected = math.ceil(vals["client_fraction"] * vals["num_clients"] - 1e-9)
        chk.need(selected >= 4 * vals["num_faulty"] + 3, "num_faulty: bulyan needs selected clients >= 4f+3")

    if chk.problems:
        raise ConfigError(chk.problems)
    return ExperimentConfig(dataset=dataset, lr=lr, faults=faults, thresholds=thresholds,
                            partition=partition, model=model, **vals)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    return parse_config(raw)
