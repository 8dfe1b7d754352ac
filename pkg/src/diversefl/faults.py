"""Fault injectors and the faulty-set schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, FrozenSet, Optional

import numpy as np

FAULT_KINDS = ("none", "gaussian", "sign_flip", "same_value", "label_flip")

# tags that keep per-purpose random streams apart
STREAM_MINIBATCH = 1
STREAM_FAULT = 2
STREAM_SELECT = 3
STREAM_SAMPLE = 4
STREAM_RESAMPLE = 5
STREAM_ROOT = 6
STREAM_SEAL = 7


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``.

    SeedSequence hashes the whole key tuple, so streams for different clients
    or rounds never depend on the order in which they are created.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class FaultSpec:
    kind: str = "none"
    faulty_ids: FrozenSet[int] = frozenset()
    sigma: float = 10.0
    seed: int = 0
    # optional override: round -> faulty ids for that round
    schedule: Optional[Callable[[int], FrozenSet[int]]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}; expected one of {FAULT_KINDS}")
        if self.kind in ("gaussian", "same_value") and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "faulty_ids", frozenset(int(j) for j in self.faulty_ids))

    def faulty_at(self, round_idx: int) -> FrozenSet[int]:
        if self.kind == "none":
            return frozenset()
        if self.schedule is not None:
            return frozenset(self.schedule(round_idx))
        return self.faulty_ids


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    payload: np.ndarray


def inject_gaussian(d: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return rng.normal(0.0, sigma, size=d)


def inject_sign_flip(update: np.ndarray) -> np.ndarray:
    return -np.asarray(update, dtype=np.float64)


def inject_same_value(d: int, sigma: float) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be positive")
    return np.full(d, float(sigma))


def flip_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Map class ``c`` to ``num_classes - 1 - c`` on a copy."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label outside [0, num_classes)")
    return num_classes - 1 - labels


def corrupt_upload(spec: FaultSpec, honest: np.ndarray, client_id: int, round_idx: int) -> np.ndarray:
    """What a faulty client uploads in place of its honest update.

    Label flipping is not handled here: it corrupts training data before the
    update is computed.
    """
    if spec.kind == "gaussian":
        return inject_gaussian(honest.size, spec.sigma, stream(spec.seed, STREAM_FAULT, client_id, round_idx))
    if spec.kind == "same_value":
        return inject_same_value(honest.size, spec.sigma)
    if spec.kind == "sign_flip":
        return inject_sign_flip(honest)
    return np.array(honest, dtype=np.float64)
