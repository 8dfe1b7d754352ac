"""Baseline aggregation rules and detection metrics.

All rules take a stacked ``(n_clients, d)`` array of uploaded updates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .errors import CapacityError

RULES = ("mean", "oracle", "median", "bulyan", "resampling", "fltrust", "diversefl")


@dataclass
class AggregateResult:
    aggregate: np.ndarray
    selection: Any
    rule: str


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    flagged: frozenset
    truth: frozenset


def _stack(updates) -> np.ndarray:
    arr = np.asarray(updates, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) stack of updates")
    return arr


def agg_mean(updates) -> AggregateResult:
    arr = _stack(updates)
    return AggregateResult(arr.mean(axis=0), np.full(arr.shape[0], 1.0 / arr.shape[0]), "mean")


def agg_oracle(updates, client_ids: Sequence[int], faulty: Iterable[int]) -> AggregateResult:
    """Mean over the clients that are not in the true faulty set."""
    arr = _stack(updates)
    faulty = set(faulty)
    keep = np.array([cid not in faulty for cid in client_ids])
    if not keep.any():
        raise ValueError("every client is faulty; oracle has nothing to average")
    return AggregateResult(arr[keep].mean(axis=0), keep.astype(np.float64) / keep.sum(), "oracle")


def agg_median(updates) -> AggregateResult:
    arr = _stack(updates)
    return AggregateResult(np.median(arr, axis=0), None, "median")


def pairwise_sq_distances(arr: np.ndarray) -> np.ndarray:
    # explicit differences, not the Gram expansion, to stay exact
    n = arr.shape[0]
    dist = np.zeros((n, n))
    for i in range(n):
        diff = arr[i + 1:] - arr[i]
        row = np.einsum("ij,ij->i", diff, diff)
        dist[i, i + 1:] = row
        dist[i + 1:, i] = row
    return dist


def _scores_from_distances(dist: np.ndarray, neighbours: int) -> np.ndarray:
    n = dist.shape[0]
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(dist[i], i))
        scores[i] = others[:neighbours].sum()
    return scores


def krum_scores(updates, f: int) -> np.ndarray:
    """Sum of squared distances to the ``n - f - 2`` nearest other updates."""
    arr = _stack(updates)
    n = arr.shape[0]
    if n < f + 3:
        raise CapacityError(f"Krum needs at least f+3={f + 3} updates, got {n}")
    return _scores_from_distances(pairwise_sq_distances(arr), n - f - 2)


def bulyan_select(arr: np.ndarray, f: int) -> list:
    """Recursive Krum: repeatedly keep the best-scored update, ``n - 2f`` times."""
    dist = pairwise_sq_distances(arr)
    remaining = list(range(arr.shape[0]))
    selected = []
    for _ in range(arr.shape[0] - 2 * f):
        if len(remaining) == 1:
            selected.append(remaining.pop())
            break
        sub = dist[np.ix_(remaining, remaining)]
        neighbours = max(len(remaining) - f - 2, 1)
        scores = _scores_from_distances(sub, neighbours)
        tied = np.flatnonzero(scores == scores.min())
        # ties go to the lexicographically smallest vector, not the lowest
        # position, so the result does not depend on input order
        rows = arr[[remaining[t] for t in tied]]
        best = int(tied[np.lexsort(rows.T[::-1])[0]])
        selected.append(remaining.pop(best))
    return selected


def agg_bulyan(updates, f: int) -> AggregateResult:
    arr = _stack(updates)
    n = arr.shape[0]
    if f < 0:
        raise ValueError("f must be non-negative")
    if n < 4 * f + 3:
        raise CapacityError(f"Bulyan needs n >= 4f+3 = {4 * f + 3}, got n={n}")
    selected = bulyan_select(arr, f)
    chosen = arr[selected]
    keep = chosen.shape[0] - 2 * f
    median = np.median(chosen, axis=0)
    # per coordinate, sort by distance to the median, then by value
    order = np.lexsort(np.stack([chosen.T, np.abs(chosen - median).T]))[:, :keep]
    closest = np.take_along_axis(chosen.T, order, axis=1).T
    return AggregateResult(closest.mean(axis=0), selected, "bulyan")


def resampling_draws(n: int, group_size: int, seed) -> np.ndarray:
    """Index groups for Resampling: ``n`` groups, no repeats inside a group."""
    if group_size < 1:
        raise ValueError("group size must be at least 1")
    if group_size > n:
        raise CapacityError(f"cannot draw {group_size} distinct updates from {n}")
    rng = np.random.default_rng(seed)
    return np.stack([rng.choice(n, size=group_size, replace=False) for _ in range(n)])


def agg_resampling(updates, group_size: int, seed=0, draws: Optional[np.ndarray] = None) -> AggregateResult:
    arr = _stack(updates)
    if draws is None:
        draws = resampling_draws(arr.shape[0], group_size, seed)
    draws = np.asarray(draws, dtype=np.int64)
    resampled = arr[draws].mean(axis=1)
    return AggregateResult(np.median(resampled, axis=0), draws, "resampling")


def agg_fltrust(updates, root_update: np.ndarray) -> AggregateResult:
    arr = _stack(updates)
    root = np.asarray(root_update, dtype=np.float64)
    root_norm = float(np.linalg.norm(root))
    if root_norm == 0.0:
        raise ValueError("root update has zero norm")
    norms = np.linalg.norm(arr, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    cos = (arr @ root) / (safe * root_norm)
    trust = np.where(norms > 0, np.maximum(cos, 0.0), 0.0)
    total = trust.sum()
    if total == 0.0:
        return AggregateResult(np.zeros_like(root), trust, "fltrust")
    rescaled = arr * (root_norm / safe)[:, None]
    return AggregateResult((trust @ rescaled) / total, trust, "fltrust")


def detection_metrics(flagged: Iterable[int], truth: Iterable[int]) -> DetectionMetrics:
    """Precision/recall of a flagged set; empty denominators count as perfect."""
    flagged, truth = frozenset(flagged), frozenset(truth)
    hits = len(flagged & truth)
    precision = hits / len(flagged) if flagged else 1.0
    recall = hits / len(truth) if truth else 1.0
    return DetectionMetrics(precision, recall, flagged, truth)
