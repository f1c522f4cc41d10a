import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from gradfix.datasets import FeatureSet, LabeledDataset
from gradfix.errors import DeficientClassError
from gradfix.selection import (
    assignment_cost,
    select,
    select_coreset,
    select_herding,
    select_kmedoids,
    select_random,
    write_selection_csv,
)


def unit_rows(rng, n, d):
    Z = rng.standard_normal((n, d))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def feature_set(Z, labels=None, ids=None):
    n = len(Z)
    return FeatureSet(Z, np.zeros(n, int) if labels is None else labels, np.arange(n) if ids is None else ids)


def brute_kmedoids_cost(Z, b):
    D = cdist(Z, Z)
    return min(D[list(c)].min(axis=0).sum() for c in itertools.combinations(range(len(Z)), b))


def brute_coreset(Z, b, coverage=False):
    """Literal transcription: seed at the medoid, then repeatedly take the
    point whose distance to the selected set is smallest (largest for
    coverage), lowest index on ties."""
    n = len(Z)
    D = cdist(Z, Z)
    S = [min(range(n), key=lambda j: (sum(D[j]), j))]
    while len(S) < b:
        rest = [x for x in range(n) if x not in S]
        dist = {x: min(D[x, s] for s in S) for x in rest}
        if coverage:
            S.append(min(rest, key=lambda x: (-dist[x], x)))
        else:
            S.append(min(rest, key=lambda x: (dist[x], x)))
    return S


@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 2), st.integers(2, 4))
def test_kmedoids_matches_exhaustive(seed, n, b, d):
    Z = unit_rows(np.random.default_rng(seed), n, d)
    sel, cost = select_kmedoids(feature_set(Z), b, return_cost=True)
    assert cost[0] == pytest.approx(brute_kmedoids_cost(Z, b), rel=1e-12, abs=1e-12)
    assert assignment_cost(Z, sel[0]) == pytest.approx(cost[0], rel=1e-12)


def test_kmedoids_two_clusters():
    rng = np.random.default_rng(1)
    a = np.array([1.0, 0.0, 0.0]) + 0.05 * rng.standard_normal((6, 3))
    c = np.array([0.0, 1.0, 0.0]) + 0.05 * rng.standard_normal((6, 3))
    Z = np.vstack([a, c])
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    [picked] = select_kmedoids(feature_set(Z), 2).values()
    assert sorted(p // 6 for p in picked) == [0, 1]


@given(st.integers(0, 10_000), st.integers(3, 15), st.integers(1, 4))
def test_kmedoids_local_optimality_and_random_baseline(seed, n, b):
    rng = np.random.default_rng(seed)
    b = min(b, n)
    Z = unit_rows(rng, n, 3)
    sel, cost = select_kmedoids(feature_set(Z), b, return_cost=True)
    med = sel[0]
    for pos in range(b):
        for h in range(n):
            if h in med:
                continue
            trial = list(med)
            trial[pos] = h
            assert assignment_cost(Z, trial) >= cost[0] - 1e-12
    for _ in range(5):
        assert cost[0] <= assignment_cost(Z, rng.choice(n, b, replace=False)) + 1e-12


@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(1, 10), st.booleans())
def test_coreset_trace_matches_formula(seed, n, b, coverage):
    b = min(b, n)
    Z = unit_rows(np.random.default_rng(seed), n, 3)
    assert select_coreset(feature_set(Z), b, coverage=coverage)[0] == brute_coreset(Z, b, coverage)


def test_coreset_line_example():
    # four points on a unit-circle arc; the medoid is an inner point and its
    # nearest neighbor comes next
    angles = np.array([0.0, 0.1, 0.25, 0.6])
    Z = np.c_[np.cos(angles), np.sin(angles)]
    fs = feature_set(Z)
    out = select_coreset(fs, 2)[0]
    assert out[0] == select_kmedoids(fs, 1)[0][0] == 1
    assert out[1] == 0


def test_herding_single_is_max_inner_product():
    rng = np.random.default_rng(3)
    Z = unit_rows(rng, 9, 4)
    mu = Z.mean(axis=0)
    assert select_herding(feature_set(Z), 1)[0] == [int(np.argmax(Z @ mu))]


def test_herding_stepwise_oracle():
    Z = unit_rows(np.random.default_rng(5), 6, 3)
    mu = Z.mean(axis=0)
    chosen = []
    for t in range(1, 5):
        best = min((j for j in range(6) if j not in chosen), key=lambda j: (np.linalg.norm(mu - (Z[chosen].sum(axis=0) + Z[j]) / t), j))
        chosen.append(best)
    assert select_herding(feature_set(Z), 4)[0] == chosen


def test_identical_points_take_lowest_ids():
    Z = np.tile([[1.0, 0.0]], (5, 1))
    fs = feature_set(Z, ids=np.array([9, 4, 7, 2, 5]))
    for fn in (select_herding, select_kmedoids, select_coreset):
        assert sorted(fn(fs, 2)[0]) == [2, 4]


@given(st.integers(0, 1000), st.integers(1, 5), st.sampled_from(["random", "herding", "kmedoids", "coreset"]))
def test_budget_exactness_and_determinism(seed, b, heuristic):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 6)
    Z = unit_rows(rng, 18, 4)
    fs = feature_set(Z, labels)
    data = LabeledDataset(Z, labels)
    sel = select(heuristic, b, data=data, features=fs, seed=seed)
    assert sel == select(heuristic, b, data=data, features=fs, seed=seed)
    for c, ids in sel.items():
        assert len(ids) == b == len(set(ids))
        assert all(labels[i] == c for i in ids)


def test_coreset_seed_is_one_medoid():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 7)
    fs = feature_set(unit_rows(rng, 21, 3), labels)
    one = select_kmedoids(fs, 1)
    for c, ids in select_coreset(fs, 3).items():
        assert ids[0] == one[c][0]


def test_random_selection():
    data = LabeledDataset(np.zeros((9, 1)), [0, 1, 2] * 3)
    assert select_random(data, 3, 0) == {0: [0, 3, 6], 1: [1, 4, 7], 2: [2, 5, 8]}
    assert select_random(data, 2, 5) == select_random(data, 2, 5)
    with pytest.raises(ValueError):
        select_random(data, 0, 0)
    with pytest.raises(DeficientClassError) as info:
        select_random(data, 4, 0)
    assert info.value.deficient == {0: 3, 1: 3, 2: 3}


def test_invalid_rows_are_skipped():
    Z = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    fs = FeatureSet(Z, [0, 0, 0], [0, 1, 2])
    assert 1 not in select_kmedoids(fs, 2)[0]
    with pytest.raises(DeficientClassError):
        select_kmedoids(fs, 3)


def test_structured_need_features_and_csv(tmp_path):
    data = LabeledDataset(np.zeros((4, 1)), [0, 1, 0, 1])
    with pytest.raises(ValueError):
        select("herding", 1, data=data)
    write_selection_csv({1: [3], 0: [2]}, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == "class,rank,source_id\n0,0,2\n1,0,3\n"


@given(st.integers(0, 10_000), st.integers(3, 15), st.integers(1, 4))
def test_pam_swap_is_locally_optimal(seed, n, b):
    from gradfix.selection import _pam
    b = min(b, n)
    D = cdist(*(2 * [unit_rows(np.random.default_rng(seed), n, 3)]))
    med, cost, _ = _pam(D, b, 100 * b)
    assert len(set(med)) == b
    for pos in range(b):
        for h in set(range(n)) - set(med):
            trial = med[:pos] + [h] + med[pos + 1:]
            assert D[trial].min(axis=0).sum() >= cost - 1e-12


def test_large_class_uses_pam():
    Z = unit_rows(np.random.default_rng(0), 80, 3)
    sel, cost = select_kmedoids(feature_set(Z), 3, return_cost=True)
    assert len(sel[0]) == 3 and assignment_cost(Z, sel[0]) == pytest.approx(cost[0], rel=1e-12)
