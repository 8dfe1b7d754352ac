"""Round-by-round federated training with fault injection.

The orchestrator plays the untrusted server plus every simulated client.
For ``rule == "diversefl"`` the clients seal their uploads and the server
only forwards blobs into the :class:`~diversefl.enclave.Enclave`; every
baseline rule sees plaintext updates.
"""

from __future__ import annotations

import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import data as data_mod
from . import nn, robust
from .config import ExperimentConfig
from .enclave import Enclave, FilterDecision, encode_sample, encode_vector, seal
from .errors import NoSurvivorsError
from .faults import (
    STREAM_MINIBATCH, STREAM_RESAMPLE, STREAM_ROOT, STREAM_SAMPLE, STREAM_SEAL, STREAM_SELECT,
    FaultSpec, corrupt_upload, flip_labels, stream,
)


@dataclass
class RoundRecord:
    round: int
    rule: str
    lr: float
    selected: List[int]
    truth: List[int]
    flagged: List[int]
    c1: Dict[int, float]
    c2: Dict[int, float]
    accuracy: Optional[float]
    precision: float
    recall: float
    aggregate_norm: float
    no_survivors: bool = False
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: List[RoundRecord]
    summary: dict = field(default_factory=dict)


def select_clients(num_clients: int, fraction: float, round_idx: int, seed: int) -> List[int]:
    size = math.ceil(fraction * num_clients - 1e-9)
    if size < 1:
        raise ValueError("client fraction selects nobody")
    if size >= num_clients:
        return list(range(num_clients))
    rng = stream(seed, STREAM_SELECT, round_idx)
    return sorted(int(j) for j in rng.choice(num_clients, size=size, replace=False))


def local_train(
    spec: nn.ModelSpec,
    dataset: data_mod.Dataset,
    theta_prev: np.ndarray,
    lr: float,
    local_steps: int,
    batch_fraction: float,
    rng: np.random.Generator,
    l2: float = 0.0,
) -> np.ndarray:
    """Run ``local_steps`` minibatch SGD steps and return ``theta_prev - theta``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("client has no local data")
    m = data_mod.sample_size(batch_fraction, n)
    theta = np.array(theta_prev, dtype=np.float64)
    for _ in range(local_steps):
        idx = rng.choice(n, size=m, replace=False)
        g = nn.loss_and_grad(spec, theta, dataset.features[idx], dataset.labels[idx], l2).gradient
        theta = nn.sgd_step(theta, g, lr)
    return np.asarray(theta_prev, dtype=np.float64) - theta


def load_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        full = data_mod.generate_synthetic(
            ds["num_classes"], ds["input_dim"], ds["train_per_class"] + ds["test_per_class"],
            ds["spread"], ds["seed"], ds["mean_scale"],
        )
        return data_mod.train_test_split_per_class(full, ds["test_per_class"])
    if ds["kind"] == "idx":
        return (
            data_mod.load_idx(ds["train_images"], ds["train_labels"], ds["num_classes"]),
            data_mod.load_idx(ds["test_images"], ds["test_labels"], ds["num_classes"]),
        )
    train = data_mod.load_csv(ds["train"], ds["num_classes"])
    return train, data_mod.load_csv(ds["test"], train.num_classes)


def choose_faulty(cfg: ExperimentConfig) -> frozenset:
    if cfg.faults.ids is not None:
        return frozenset(cfg.faults.ids)
    if cfg.faults.kind == "none" or cfg.num_faulty == 0:
        return frozenset()
    rng = stream(cfg.seed, 0xFA17)
    return frozenset(int(j) for j in rng.choice(cfg.num_clients, size=cfg.num_faulty, replace=False))


class Simulation:
    """Mutable state of one experiment: global model, client data, enclave."""

    def __init__(self, cfg: ExperimentConfig, datasets=None, workers: int = 1):
        self.cfg = cfg
        self.workers = max(1, workers)
        train, test = datasets if datasets is not None else load_datasets(cfg)
        self.train, self.test = train, test
        self.spec = nn.ModelSpec((train.input_dim, *cfg.model.hidden, train.num_classes), cfg.model.init_seed)
        self.theta = nn.init_model(self.spec)

        if cfg.partition.mode == "sorted":
            self.plan = data_mod.partition_sorted(train.labels, cfg.num_clients)
        else:
            self.plan = data_mod.partition_shards(train.labels, cfg.num_clients, cfg.partition.k, cfg.seed)
        self.client_data = [train.subset(idx) for idx in self.plan.assignment]

        faulty = choose_faulty(cfg)
        self.fault_spec = FaultSpec(cfg.faults.kind if faulty else "none", faulty, cfg.faults.sigma, cfg.seed)

        self.keys: Dict[int, bytes] = {}
        self.enclave: Optional[Enclave] = None
        if cfg.rule == "diversefl" or cfg.trace_similarity:
            self._setup_enclave()

        self.root: Optional[data_mod.Dataset] = None
        if cfg.rule == "fltrust":
            self.root = data_mod.draw_uniform(train, cfg.root_rate, stream(cfg.seed, STREAM_ROOT))

    def _setup_enclave(self):
        cfg = self.cfg
        self.enclave = Enclave(self.spec, cfg.thresholds, cfg.l2, key_secret=cfg.seed)
        # offline phase: every client shares one stratified sample
        for cid, local in enumerate(self.client_data):
            key = self.enclave.establish_key(cid)
            self.keys[cid] = key
            batch = data_mod.draw_sample(local, cfg.sample_rate, stream(cfg.seed, STREAM_SAMPLE, cid), owner=cid)
            self.enclave.provision_sample(seal(encode_sample(batch), key, cid, 0, 0))

    def _client_upload(self, cid: int, round_idx: int, lr: float, faulty: bool) -> np.ndarray:
        cfg = self.cfg
        local = self.client_data[cid]
        if faulty and self.fault_spec.kind == "label_flip":
            local = data_mod.Dataset(local.features, flip_labels(local.labels, local.num_classes), local.num_classes)
        rng = stream(cfg.seed, STREAM_MINIBATCH, cid, round_idx)
        honest = local_train(self.spec, local, self.theta, lr, cfg.local_steps, cfg.batch_fraction, rng, cfg.l2)
        if faulty and self.fault_spec.kind != "label_flip":
            return corrupt_upload(self.fault_spec, honest, cid, round_idx)
        return honest

    def _seal_all(self, selected, uploads, round_idx):
        return [
            seal(encode_vector(uploads[k]), self.keys[cid], cid, round_idx,
                 int(stream(self.cfg.seed, STREAM_SEAL, cid, round_idx).integers(2**63)))
            for k, cid in enumerate(selected)
        ]

    def run_round(self, round_idx: int) -> RoundRecord:
        cfg = self.cfg
        started = time.perf_counter()
        lr = cfg.lr.lr_at(round_idx)
        selected = select_clients(cfg.num_clients, cfg.client_fraction, round_idx, cfg.seed)
        truth = sorted(self.fault_spec.faulty_at(round_idx) & set(selected))
        truth_set = set(truth)

        tasks = [(cid, round_idx, lr, cid in truth_set) for cid in selected]
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                uploads = list(pool.map(lambda t: self._client_upload(*t), tasks))
        else:
            uploads = [self._client_upload(*t) for t in tasks]

        decisions: List[FilterDecision] = []
        flagged: List[int] = []
        no_survivors = False
        theta_prev = self.theta
        if cfg.rule == "diversefl":
            blobs = self._seal_all(selected, uploads, round_idx)
            try:
                outcome = self.enclave.secure_round(theta_prev, blobs, lr, cfg.local_steps, round_idx)
                self.theta = outcome.theta
                decisions = outcome.decisions
            except NoSurvivorsError as exc:
                no_survivors = True
                decisions = exc.decisions
                self.theta = exc.theta
            flagged = sorted(d.client_id for d in decisions if not d.passed)
        else:
            if self.enclave is not None:
                blobs = self._seal_all(selected, uploads, round_idx)
                decisions = self.enclave.inspect_round(theta_prev, blobs, lr, cfg.local_steps, round_idx)
            stack = np.stack(uploads)
            result = self._baseline(stack, selected, truth, round_idx, lr)
            self.theta = theta_prev - result.aggregate
            if cfg.rule == "oracle":
                flagged = list(truth)

        accuracy = None
        if round_idx % cfg.eval_every == 0 or round_idx == cfg.rounds:
            accuracy = nn.evaluate(self.spec, self.theta, self.test.features, self.test.labels)
        metrics = robust.detection_metrics(flagged, truth)
        return RoundRecord(
            round=round_idx, rule=cfg.rule, lr=lr, selected=list(selected), truth=truth, flagged=flagged,
            c1={d.client_id: d.c1 for d in decisions}, c2={d.client_id: d.c2 for d in decisions},
            accuracy=accuracy, precision=metrics.precision, recall=metrics.recall,
            aggregate_norm=float(np.linalg.norm(theta_prev - self.theta)),
            no_survivors=no_survivors, wall_time=time.perf_counter() - started,
        )

    def _baseline(self, stack, selected, truth, round_idx, lr) -> robust.AggregateResult:
        cfg = self.cfg
        rule = cfg.rule
        if rule == "mean":
            return robust.agg_mean(stack)
        if rule == "oracle":
            return robust.agg_oracle(stack, selected, truth)
        if rule == "median":
            return robust.agg_median(stack)
        if rule == "bulyan":
            return robust.agg_bulyan(stack, cfg.num_faulty)
        if rule == "resampling":
            return robust.agg_resampling(stack, cfg.resampling_group, stream(cfg.seed, STREAM_RESAMPLE, round_idx))
        if rule == "fltrust":
            rng = stream(cfg.seed, STREAM_ROOT, round_idx)
            root_update = local_train(self.spec, self.root, self.theta, lr, cfg.local_steps, cfg.batch_fraction, rng, cfg.l2)
            return robust.agg_fltrust(stack, root_update)
        raise ValueError(f"unknown rule {rule!r}")


def summarize(cfg: ExperimentConfig, records: List[RoundRecord]) -> dict:
    evaluated = [r.accuracy for r in records if r.accuracy is not None]
    late = [r for r in records if r.round > cfg.metrics_warmup] or records
    traces: Dict[str, dict] = {}
    for r in records:
        for cid in r.c1:
            t = traces.setdefault(str(cid), {"round": [], "c1": [], "c2": []})
            t["round"].append(r.round)
            t["c1"].append(r.c1[cid])
            t["c2"].append(r.c2[cid])
    anomalies = sum(r.no_survivors for r in records)
    return {
        "rule": cfg.rule,
        "rounds": len(records),
        "final_accuracy": records[-1].accuracy if records else None,
        "best_accuracy": max(evaluated) if evaluated else None,
        "mean_precision": float(np.mean([r.precision for r in late])) if records else None,
        "mean_recall": float(np.mean([r.recall for r in late])) if records else None,
        "metrics_after_round": cfg.metrics_warmup,
        "no_survivor_rounds": anomalies,
        "anomaly": anomalies > cfg.max_anomaly_fraction * len(records),
        "traces": traces,
    }


def run_experiment(cfg: ExperimentConfig, datasets=None, workers: int = 1, progress=None) -> ExperimentResult:
    sim = Simulation(cfg, datasets, workers)
    records = []
    for i in range(1, cfg.rounds + 1):
        records.append(sim.run_round(i))
        if progress is not None:
            progress(records[-1])
    result = ExperimentResult(cfg, records, summarize(cfg, records))
    result.summary["faulty_ids"] = sorted(sim.fault_spec.faulty_ids)
    return result


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.17g}"
    return str(value)


def rounds_csv(cfg: ExperimentConfig, records: List[RoundRecord]) -> str:
    """Per-round table; wall time is left out so identical runs diff clean."""
    n = cfg.num_clients
    header = ["round", "rule", "lr", "accuracy", "precision", "recall", "aggregate_norm",
              "no_survivors", "selected_ids", "faulty_ids", "flagged_ids"]
    header += [f"c1_{j}" for j in range(n)] + [f"c2_{j}" for j in range(n)]
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for r in records:
        row = [r.round, r.rule, r.lr, r.accuracy, r.precision, r.recall, r.aggregate_norm,
               int(r.no_survivors), " ".join(map(str, r.selected)), " ".join(map(str, r.truth)),
               " ".join(map(str, r.flagged))]
        row += [r.c1.get(j) for j in range(n)] + [r.c2.get(j) for j in range(n)]
        out.write(",".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


def trace_dat(records: List[RoundRecord]) -> str:
    """Whitespace-separated C1, C2 and C1*C2 per (round, client) for gnuplot."""
    lines = ["# round client c1 c2 c1xc2 faulty"]
    for r in records:
        truth = set(r.truth)
        for cid in sorted(r.c1):
            c1, c2 = r.c1[cid], r.c2[cid]
            lines.append(f"{r.round} {cid} {_fmt(c1)} {_fmt(c2)} {_fmt(c1 * c2)} {int(cid in truth)}")
    return "\n".join(lines) + "\n"


def summary_json(result: ExperimentResult) -> str:
    def clean(obj):
        if isinstance(obj, float) and not math.isfinite(obj):
            return str(obj)
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj
    return json.dumps(clean(result.summary), indent=2, sort_keys=True)
