import json
import os

import numpy as np
import pytest

import gradfix.harness as harness
from gradfix.config import load_config
from gradfix.errors import NumericError, StageError
from gradfix.harness import (
    fewshot_baseline,
    prepare_fixture,
    report_emit,
    run_and_emit,
    run_pipeline,
    select_alpha,
    sweep_alpha,
)
from gradfix.model import TrainConfig, evaluate
from gradfix.param_space import add_scaled
from gradfix.selection import flatten_selection, select_random
from gradfix.signs import majority_vote_signs
from gradfix.transport import build_delta, mask_agreement, transport

SMALL = ["experiment.budgets=1,2", "experiment.seeds=0,1,2"]


@pytest.fixture(scope="module")
def small_cfg():
    return load_config(None, SMALL)


@pytest.fixture(scope="module")
def report(small_cfg, canonical):
    return run_pipeline(small_cfg, fixture=canonical)


def test_baseline_rows_are_definitions(report, canonical):
    test = canonical.world["test"]
    spec = canonical.spec
    [z] = report.select(variant="zero_shot")
    [n] = report.select(variant="naive_add")
    [f] = report.select(variant="fine_tune")
    assert z["accuracy"] == evaluate(canonical.theta_B, test, spec) and z["seed"] == -1
    assert n["accuracy"] == evaluate(add_scaled(canonical.theta_B, canonical.tau_A, 1.0), test, spec) and n["alpha"] == 1.0
    assert f["accuracy"] == evaluate(canonical.theta_B_ft, test, spec)


def test_oracle_row_matches_direct_computation(report, canonical):
    [o] = report.select(variant="oracle", strategy="agreement")
    m = mask_agreement(canonical.sign_tau_A, canonical.sign_tau_B)
    theta = transport(canonical.theta_B, build_delta(m, canonical.tau_A, o["alpha"]), "oracle_tau_B")
    assert o["accuracy"] == evaluate(theta, canonical.world["test"], canonical.spec)
    assert o["reference"] == "oracle_tau_B"


def test_row_structure(report, small_cfg):
    keys = [(r["variant"], r["reference"], r["strategy"], r["aggregation"], r["heuristic"], r["b"], r["seed"]) for r in report.rows]
    assert len(keys) == len(set(keys))
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in report.rows)
    gradfix = report.select(variant="gradfix", strategy="agreement", aggregation="majority", heuristic="random", b=1)
    assert [r["seed"] for r in gradfix] == [0, 1, 2]
    assert len(report.select(variant="gradfix", heuristic="kmedoids", b=2, strategy="agreement", aggregation="mean")) == 1
    assert all(r["reference"] == "gradient_signs" for r in report.select(variant="gradfix"))
    assert all(r["agree.whole"] is not None for r in report.select(variant="gradfix"))


def test_descent_invariant_for_exact_signs(report):
    rows = report.select(variant="gradfix", aggregation="mean")
    assert rows
    assert all(r["descent_inner_product"] >= 0 for r in rows)


def test_alpha_selection_rules():
    assert select_alpha([0.1, 0.2, 0.3], [0.5, 0.7, 0.7]) == 0.2
    assert select_alpha([0.4], [0.0]) == 0.4
    with pytest.raises(ValueError):
        select_alpha([], [])


def test_single_alpha_grid(canonical):
    cfg = load_config(None, ["experiment.alphas=0.3"])
    sweep = sweep_alpha(cfg, "oracle", fixture=canonical)
    assert sweep.selected == 0.3 and len(sweep.val_accuracy) == 1


def test_sweep_alpha_variants(canonical, small_cfg):
    for variant in ("oracle", "gradfix", "random_mask"):
        sweep = sweep_alpha(small_cfg, variant, fixture=canonical)
        assert sweep.selected in sweep.alphas
        i = sweep.alphas.index(sweep.selected)
        assert sweep.val_accuracy[i] == max(sweep.val_accuracy)


def test_fewshot_baseline(canonical):
    sub = canonical.train.subset(flatten_selection(select_random(canonical.train, 1, 0)))
    zero = TrainConfig(steps=0)
    assert fewshot_baseline(canonical.theta_B, sub, zero, canonical.spec) == canonical.theta_B
    cfg = load_config().fewshot
    a = fewshot_baseline(canonical.theta_B, sub, cfg, canonical.spec)
    assert a == fewshot_baseline(canonical.theta_B, sub, cfg, canonical.spec)
    assert a != canonical.theta_B


def test_full_class_budget_is_deterministic(canonical):
    n_c = int(canonical.train.class_counts().min())
    subs = [canonical.train.subset(flatten_selection(select_random(canonical.train, n_c, s))) for s in (0, 1)]
    assert majority_vote_signs(canonical.theta_B, subs[0], canonical.spec).signs == majority_vote_signs(canonical.theta_B, subs[1], canonical.spec).signs


def test_emit_is_deterministic(report, tmp_path):
    a = report_emit(report, tmp_path / "a")
    b = report_emit(report, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()
    doc = json.loads(open(tmp_path / "a" / "report.json").read())
    n_csv = len(open(tmp_path / "a" / "report.csv").read().splitlines()) - 1
    assert len(doc["rows"]) == n_csv == len(report.rows)
    assert doc["config_hash"] == report.config_hash and doc["toolkit_version"]
    assert list(doc["rows"][0]) == list(report.fields)


def test_stage_errors_quarantine(tmp_path, monkeypatch):
    cfg = load_config(None, SMALL + ["experiment.save_checkpoints=true", "pretrain.steps=20", "finetune.steps=5"])

    def boom(*a, **k):
        raise NumericError("synthetic failure")

    monkeypatch.setattr(harness, "estimate_signs", boom)
    with pytest.raises(StageError) as info:
        run_and_emit(cfg, tmp_path)
    assert info.value.stage == "signs"
    assert sorted(os.listdir(tmp_path / "quarantine"))[0] == "tau_A.gfx"
    assert not (tmp_path / "report.csv").exists()


def test_checkpoints_promoted_on_success(tmp_path):
    cfg = load_config(None, ["experiment.budgets=1", "experiment.seeds=0", "experiment.heuristics=random", "experiment.save_checkpoints=true", "pretrain.steps=20", "finetune.steps=5"])
    run_and_emit(cfg, tmp_path)
    assert len(os.listdir(tmp_path / "checkpoints")) == 6
    assert (tmp_path / "report_alpha.csv").exists()


def test_prepare_fixture_is_reproducible(canonical_cfg, canonical):
    again = prepare_fixture(canonical_cfg)
    assert again.theta_A == canonical.theta_A and again.tau_B == canonical.tau_B
    assert np.array_equal(again.features_A.rows, canonical.features_A.rows)
