"""Per-class supervision-subset heuristics: random, herding, k-medoids, coreset.

Structured heuristics work on unit-normalized embeddings with Euclidean
distance.  Every selector returns ``{class: [source_id, ...]}`` in selection
order, and breaks ties toward the lowest source id.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings

import numpy as np
from scipy.spatial.distance import cdist

from .datasets import FeatureSet, LabeledDataset
from .errors import DeficientClassError
from .param_space import atomic_write_bytes

__all__ = [
    "HEURISTICS",
    "select_random",
    "select_herding",
    "select_kmedoids",
    "select_coreset",
    "select",
    "assignment_cost",
    "flatten_selection",
    "write_selection_csv",
]

HEURISTICS = ("random", "herding", "kmedoids", "coreset")


def _check_budget(b):
    if int(b) != b or b < 1:
        raise ValueError(f"per-class budget must be an integer >= 1, got {b!r}")
    return int(b)


def _class_members(labels, ids, valid, b):
    """Map class -> source ids sorted ascending; raise if any class is short."""
    members = {}
    for c in np.unique(labels):
        sel = (labels == c) & valid
        members[int(c)] = np.sort(ids[sel])
    short = {c: len(m) for c, m in members.items() if len(m) < b}
    if short:
        raise DeficientClassError(b, short)
    return members


def select_random(data: LabeledDataset, b: int, seed: int) -> dict[int, list[int]]:
    """``b`` row indices per class, uniform without replacement, ascending order."""
    b = _check_budget(b)
    members = _class_members(data.labels, np.arange(len(data)), np.ones(len(data), bool), b)
    rng = np.random.default_rng(seed)
    return {c: sorted(int(i) for i in rng.choice(m, size=b, replace=False)) for c, m in members.items()}


def _features_by_class(features: FeatureSet, b):
    b = _check_budget(b)
    members = _class_members(features.labels, features.source_ids, features.valid, b)
    row_of = {int(s): k for k, s in enumerate(features.source_ids)}
    out = {}
    for c, ids in members.items():
        rows = np.array([row_of[int(s)] for s in ids], dtype=np.int64)
        out[c] = (ids, features.rows[rows])
    return b, out


def select_herding(features: FeatureSet, b: int) -> dict[int, list[int]]:
    """Greedy running-average match to the class mean embedding."""
    b, groups = _features_by_class(features, b)
    out = {}
    for c, (ids, Z) in groups.items():
        mu = Z.mean(axis=0)
        running = np.zeros_like(mu)
        free = np.ones(len(ids), dtype=bool)
        chosen = []
        for t in range(1, b + 1):
            err = np.linalg.norm(mu[None, :] - (running[None, :] + Z) / t, axis=1)
            err[~free] = np.inf
            j = int(np.argmin(err))
            chosen.append(int(ids[j]))
            running += Z[j]
            free[j] = False
        out[c] = chosen
    return out


def _medoid(D):
    return int(np.argmin(D.sum(axis=1)))


def _pam(D, b, max_iter):
    """BUILD then best-improvement SWAP; returns (medoid positions, cost, iterations)."""
    m = D.shape[0]
    medoids = [_medoid(D)]
    nearest = D[medoids[0]].copy()
    while len(medoids) < b:
        gains = np.minimum(nearest[None, :], D).sum(axis=1)
        gains[medoids] = np.inf
        j = int(np.argmin(gains))
        medoids.append(j)
        nearest = np.minimum(nearest, D[j])
    cost = float(nearest.sum())
    it = 0
    while it < max_iter:
        best = (cost, None, None)
        for pos in range(b):
            others = [medoids[k] for k in range(b) if k != pos]
            base = D[others].min(axis=0) if others else np.full(m, np.inf)
            costs = np.minimum(base[None, :], D).sum(axis=1)
            costs[medoids] = np.inf
            h = int(np.argmin(costs))
            if costs[h] < best[0] - 1e-12 * max(1.0, abs(cost)):
                best = (float(costs[h]), pos, h)
        if best[1] is None:
            return medoids, cost, it
        cost = best[0]
        medoids[best[1]] = best[2]
        it += 1
    warnings.warn(f"k-medoids SWAP hit the iteration cap ({max_iter})", RuntimeWarning)
    return medoids, cost, it


# classes small enough to enumerate every b-subset get the exact optimum;
# SWAP alone can stop at a local one
EXACT_SUBSETS = 2000


def _exhaustive(D, b):
    """Lowest-cost b-subset, lexicographically first on ties."""
    best, best_cost = None, math.inf
    for combo in itertools.combinations(range(D.shape[0]), b):
        cost = float(D[list(combo)].min(axis=0).sum())
        if cost < best_cost - 1e-12 * max(1.0, abs(best_cost) if best_cost < math.inf else 1.0):
            best, best_cost = list(combo), cost
    return best, best_cost


def assignment_cost(Z: np.ndarray, medoid_rows) -> float:
    """Sum over points of the distance to the nearest selected point."""
    D = cdist(Z, Z[list(medoid_rows)])
    return float(D.min(axis=1).sum())


def select_kmedoids(features: FeatureSet, b: int, distance: str = "euclidean_on_normalized", return_cost: bool = False):
    """PAM (BUILD + SWAP, at most ``100*b`` swaps) per class.

    Classes with at most ``EXACT_SUBSETS`` candidate subsets are solved by
    enumeration instead, so small classes always get the global optimum.

    With ``return_cost`` a second dict maps class -> final assignment cost.
    """
    if distance != "euclidean_on_normalized":
        raise ValueError("only 'euclidean_on_normalized' distance is supported")
    b, groups = _features_by_class(features, b)
    out, costs = {}, {}
    for c, (ids, Z) in groups.items():
        D = cdist(Z, Z)
        if math.comb(len(ids), b) <= EXACT_SUBSETS:
            medoids, cost = _exhaustive(D, b)
        else:
            medoids, cost, _ = _pam(D, b, 100 * b)
        out[c] = [int(ids[j]) for j in medoids]
        costs[c] = cost
    return (out, costs) if return_cost else out


def select_coreset(features: FeatureSet, b: int, coverage: bool = False) -> dict[int, list[int]]:
    """Medoid seed, then repeatedly the unselected point nearest to the selected set.

    ``coverage=True`` takes the farthest point instead (k-center greedy).
    """
    b, groups = _features_by_class(features, b)
    out = {}
    for c, (ids, Z) in groups.items():
        D = cdist(Z, Z)
        chosen = [_medoid(D)]
        dmin = D[chosen[0]].copy()
        while len(chosen) < b:
            score = -dmin if coverage else dmin.copy()
            score[chosen] = np.inf
            j = int(np.argmin(score))
            chosen.append(j)
            dmin = np.minimum(dmin, D[j])
        out[c] = [int(ids[j]) for j in chosen]
    return out


def select(heuristic: str, b: int, data: LabeledDataset | None = None, features: FeatureSet | None = None, seed: int | None = None, coverage: bool = False):
    if heuristic == "random":
        return select_random(data, b, seed)
    if features is None:
        raise ValueError(f"heuristic {heuristic!r} needs embeddings")
    if heuristic == "herding":
        return select_herding(features, b)
    if heuristic == "kmedoids":
        return select_kmedoids(features, b)
    if heuristic == "coreset":
        return select_coreset(features, b, coverage=coverage)
    raise ValueError(f"unknown heuristic {heuristic!r}; expected one of {HEURISTICS}")


def flatten_selection(selection: dict[int, list[int]]) -> list[int]:
    return [i for c in sorted(selection) for i in selection[c]]


def write_selection_csv(selection: dict[int, list[int]], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "rank", "source_id"])
    for c in sorted(selection):
        for rank, sid in enumerate(selection[c]):
            writer.writerow([c, rank, sid])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
