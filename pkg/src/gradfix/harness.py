"""End-to-end experiment pipeline: world, pre-trains, fine-tunes, every
transport variant and baseline, alpha selection and report emission."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import os
import shutil
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .datasets import FeatureSet, LabeledDataset, make_world
from .errors import ConfigError, GradFixError, StageError
from .model import ModelSpec, TrainConfig, embed, evaluate, grad, init_params, loss, train
from .param_space import (
    ParamVector,
    SignVector,
    TaskVector,
    add_scaled,
    agreement_stats,
    atomic_write_bytes,
    diff,
    save_checkpoint,
    sign_of,
)
from .selection import flatten_selection, select
from .signs import estimate_signs
from .transport import build_delta, build_mask, descent_check, mask_random, transport, transport_direction

__all__ = [
    "cell_seed",
    "Fixture",
    "prepare_fixture",
    "ExperimentReport",
    "AlphaSweep",
    "run_pipeline",
    "sweep_alpha",
    "select_alpha",
    "fewshot_baseline",
    "report_emit",
    "run_and_emit",
    "VARIANTS",
    "BASE_FIELDS",
]

VARIANTS = ("zero_shot", "fine_tune", "naive_add", "oracle", "random_mask", "gradfix", "fewshot")
BASE_FIELDS = (
    "world_seed",
    "variant",
    "reference",
    "strategy",
    "aggregation",
    "heuristic",
    "b",
    "alpha",
    "seed",
    "accuracy",
    "val_accuracy",
    "loss",
    "descent_inner_product",
    "retained_fraction",
)
CURVE_FIELDS = ("world_seed", "variant", "reference", "strategy", "aggregation", "heuristic", "b", "alpha", "val_accuracy", "test_accuracy", "selected")


def cell_seed(master: int, *key) -> int:
    """Deterministic 32-bit seed for a ``(master, key...)`` cell."""
    words = [int(master)]
    for k in key:
        words.append(zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@contextlib.contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except GradFixError as exc:
        raise StageError(name, exc) from exc
    except (ValueError, ArithmeticError, OSError) as exc:
        raise StageError(name, exc) from exc


@dataclass(frozen=True, eq=False)
class Fixture:
    world_seed: int
    spec: ModelSpec
    world: dict
    theta_A: ParamVector
    theta_B: ParamVector
    theta_A_ft: ParamVector
    theta_B_ft: ParamVector
    tau_A: TaskVector
    tau_B: TaskVector
    sign_tau_A: SignVector
    sign_tau_B: SignVector
    features_A: FeatureSet | None
    g_train: ParamVector

    @property
    def train(self) -> LabeledDataset:
        return self.world["train"]


def prepare_fixture(cfg: ExperimentConfig, checkpoint_dir=None) -> Fixture:
    """World, both pre-trains and both fine-tunes for ``cfg.world.seed``."""
    ws = cfg.world.seed
    spec = cfg.model
    with _stage("world"):
        world = make_world(cfg.world)
    with _stage("pretrain"):
        theta_A = train(init_params(spec, cell_seed(ws, "init", "A")), world["pretrainA"], replace(cfg.pretrain, seed=cell_seed(ws, "pretrain", "A")), spec)
        theta_B = train(init_params(spec, cell_seed(ws, "init", "B")), world["pretrainB"], replace(cfg.pretrain, seed=cell_seed(ws, "pretrain", "B")), spec)
    with _stage("finetune"):
        theta_A_ft = train(theta_A, world["train"], replace(cfg.finetune, seed=cell_seed(ws, "finetune", "A")), spec)
        theta_B_ft = train(theta_B, world["train"], replace(cfg.finetune, seed=cell_seed(ws, "finetune", "B")), spec)
        tau_A = diff(theta_A_ft, theta_A)
        tau_B = diff(theta_B_ft, theta_B)
    with _stage("embed"):
        features = embed(theta_A, world["train"], spec) if spec.hidden_dims else None
        g_train = grad(theta_B, world["train"], spec)
    if checkpoint_dir is not None:
        with _stage("checkpoints"):
            os.makedirs(checkpoint_dir, exist_ok=True)
            for name, v in (("theta_A", theta_A), ("theta_B", theta_B), ("theta_A_ft", theta_A_ft), ("theta_B_ft", theta_B_ft), ("tau_A", tau_A), ("tau_B", tau_B)):
                save_checkpoint(v, os.path.join(checkpoint_dir, f"{name}.gfx"))
    zt = cfg.experiment.zero_tol
    return Fixture(ws, spec, world, theta_A, theta_B, theta_A_ft, theta_B_ft, tau_A, tau_B, sign_of(tau_A, zt), sign_of(tau_B, zt), features, g_train)


def fewshot_baseline(theta_B: ParamVector, subset: LabeledDataset, cfg: TrainConfig, spec: ModelSpec) -> ParamVector:
    """``theta_B`` fine-tuned on the supervision subset with the few-shot recipe."""
    return train(theta_B, subset, cfg, spec)


def select_alpha(alphas, val_scores) -> float:
    """Argmax of validation score; ties go to the smaller alpha."""
    pairs = sorted(zip((float(a) for a in alphas), val_scores))
    if not pairs:
        raise ValueError("empty alpha grid")
    return max(pairs, key=lambda p: (p[1], -p[0]))[0]


@dataclass
class AlphaSweep:
    alphas: tuple[float, ...]
    val_accuracy: tuple[float, ...]
    test_accuracy: tuple[float, ...]
    selected: float

    @property
    def selects_one(self) -> bool:
        return self.selected == 1.0


class _Evaluator:
    def __init__(self, fx: Fixture):
        self.fx = fx
        self.val = fx.world["val"]
        self.test = fx.world["test"]

    def __call__(self, theta):
        spec = self.fx.spec
        return evaluate(theta, self.test, spec), evaluate(theta, self.val, spec), loss(theta, self.test, spec)


def _subset(fx: Fixture, heuristic: str, b: int, seed: int) -> LabeledDataset:
    with _stage("select"):
        rows = select(heuristic, b, data=fx.train, features=fx.features_A, seed=cell_seed(fx.world_seed, "subset", b, seed))
        return fx.train.subset(flatten_selection(rows), split="support")


def _curve(fx, ev, mask, reference, alphas, g_ref):
    """Evaluate ``transport(theta_B, alpha * mask * tau_A)`` over the grid."""
    out = []
    for a in alphas:
        delta = build_delta(mask, fx.tau_A, a)
        theta = transport(fx.theta_B, delta, reference)
        test_acc, val_acc, test_loss = ev(theta)
        descent = -transport_direction(reference) * descent_check(g_ref, delta)
        out.append((float(a), test_acc, val_acc, test_loss, descent))
    return out


@dataclass
class ExperimentReport:
    fields: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    alpha_curves: list[dict] = field(default_factory=list)
    config_hash: str = ""
    config: dict = field(default_factory=dict)
    version: str = __version__

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def accuracies(self, **match) -> np.ndarray:
        return np.array([r["accuracy"] for r in self.select(**match)], dtype=float)


def _row(fields_, **values):
    row = {k: None for k in fields_}
    row.update(values)
    return row


def _agreement_cols(s_ref: SignVector, sign_tau_B: SignVector) -> dict:
    cols = {}
    for name, frac, n in agreement_stats(s_ref, sign_tau_B, "whole") + agreement_stats(s_ref, sign_tau_B, "per_segment"):
        cols[f"agree.{name}"] = frac if n else None
    return cols


_ORDER = {v: i for i, v in enumerate(VARIANTS)}


def _sort_key(r):
    return (
        r["world_seed"],
        _ORDER[r["variant"]],
        r["reference"] or "",
        r["strategy"] or "",
        r["aggregation"] or "",
        r["heuristic"] or "",
        -1 if r["b"] is None else r["b"],
        r["seed"],
    )


def _sweep_rows(fx, group, curves, seeds, fields_, extra=None):
    """Pick alpha on mean validation accuracy across seeds; emit one row per seed."""
    alphas = [c[0] for c in curves[0]]
    val = [float(np.mean([c[i][2] for c in curves])) for i in range(len(alphas))]
    test = [float(np.mean([c[i][1] for c in curves])) for i in range(len(alphas))]
    chosen = select_alpha(alphas, val)
    k = alphas.index(chosen)
    rows = []
    for j, (seed, c) in enumerate(zip(seeds, curves)):
        a, test_acc, val_acc, test_loss, descent = c[k]
        more = extra[j] if extra else {}
        rows.append(_row(fields_, world_seed=fx.world_seed, alpha=a, seed=seed, accuracy=test_acc, val_accuracy=val_acc, loss=test_loss, descent_inner_product=descent, **group, **more))
    curve_rows = [
        dict(world_seed=fx.world_seed, **{k2: group.get(k2) for k2 in ("variant", "reference", "strategy", "aggregation", "heuristic", "b")}, alpha=a, val_accuracy=v, test_accuracy=t, selected=(a == chosen))
        for a, v, t in zip(alphas, val, test)
    ]
    return rows, curve_rows, AlphaSweep(tuple(alphas), tuple(val), tuple(test), chosen)


def _oracle_sweep(fx, ev, strategy, alphas):
    mask = build_mask(strategy, fx.sign_tau_A, fx.sign_tau_B)
    return mask, _curve(fx, ev, mask, "oracle_tau_B", alphas, fx.g_train)


def sweep_alpha(cfg: ExperimentConfig, variant: str = "oracle", strategy: str = "agreement", aggregation: str = "majority", heuristic: str = "random", b: int = 1, fixture: Fixture | None = None) -> AlphaSweep:
    """Validation-selected alpha for one variant, with the full curve.

    ``variant`` is ``oracle``, ``gradfix`` or ``random_mask``; gradfix and
    random masks average the curve over ``cfg.experiment.seeds``.
    """
    fx = fixture or prepare_fixture(cfg)
    ev = _Evaluator(fx)
    alphas = cfg.experiment.alphas
    seeds = cfg.experiment.seeds
    with _stage("sweep_alpha"):
        if variant == "oracle":
            _, c = _oracle_sweep(fx, ev, strategy, alphas)
            curves, seeds = [c], (-1,)
        elif variant == "random_mask":
            curves = [_curve(fx, ev, mask_random(fx.sign_tau_A, cell_seed(fx.world_seed, "random_mask", s)), "oracle_tau_B", alphas, fx.g_train) for s in seeds]
        elif variant == "gradfix":
            curves = []
            for s in seeds:
                sub = _subset(fx, heuristic, b, s)
                est = estimate_signs(fx.theta_B, sub, fx.spec, aggregation, cfg.experiment.zero_tol)
                mask = build_mask(strategy, fx.sign_tau_A, est.signs)
                curves.append(_curve(fx, ev, mask, "gradient_signs", alphas, grad(fx.theta_B, sub, fx.spec)))
        else:
            raise ConfigError(f"sweep_alpha variant must be oracle, gradfix or random_mask, got {variant!r}")
    _, _, sweep = _sweep_rows(fx, {"variant": variant}, curves, seeds, BASE_FIELDS)
    return sweep


def run_pipeline(cfg: ExperimentConfig, fixture: Fixture | None = None, checkpoint_dir=None) -> ExperimentReport:
    """All rows for one world seed.

    Seed-independent rows (zero-shot, fine-tune, naive add, oracle and the
    deterministic subset heuristics) carry ``seed = -1``.
    """
    fx = fixture or prepare_fixture(cfg, checkpoint_dir)
    exp = cfg.experiment
    ev = _Evaluator(fx)
    agree_names = ["agree.whole"] + [f"agree.{n}" for n in fx.theta_B.names]
    fields_ = BASE_FIELDS + tuple(agree_names)
    rows, curves = [], []
    ws = fx.world_seed

    with _stage("baselines"):
        for variant, theta in (("zero_shot", fx.theta_B), ("fine_tune", fx.theta_B_ft), ("naive_add", add_scaled(fx.theta_B, fx.tau_A, 1.0))):
            test_acc, val_acc, test_loss = ev(theta)
            alpha = 1.0 if variant == "naive_add" else None
            rows.append(_row(fields_, world_seed=ws, variant=variant, alpha=alpha, seed=-1, accuracy=test_acc, val_accuracy=val_acc, loss=test_loss))

    with _stage("oracle"):
        for strategy in exp.strategies:
            if strategy == "random":
                continue
            mask, c = _oracle_sweep(fx, ev, strategy, exp.alphas)
            group = dict(variant="oracle", reference="oracle_tau_B", strategy=strategy)
            r, cr, _ = _sweep_rows(fx, group, [c], (-1,), fields_, [{"retained_fraction": mask.retained_fraction()}])
            rows += r
            curves += cr

    if "random" in exp.strategies:
        with _stage("random_mask"):
            masks = [mask_random(fx.sign_tau_A, cell_seed(ws, "random_mask", s)) for s in exp.seeds]
            c = [_curve(fx, ev, m, "oracle_tau_B", exp.alphas, fx.g_train) for m in masks]
            extra = [{"retained_fraction": m.retained_fraction(over=fx.sign_tau_A)} for m in masks]
            group = dict(variant="random_mask", reference="oracle_tau_B", strategy="random")
            r, cr, _ = _sweep_rows(fx, group, c, exp.seeds, fields_, extra)
            rows += r
            curves += cr

    grad_strategies = [s for s in exp.strategies if s != "random"]
    for b in exp.budgets:
        for heuristic in exp.heuristics:
            seeds = exp.seeds if heuristic == "random" else (-1,)
            subsets = [_subset(fx, heuristic, b, s) for s in seeds]
            with _stage("fewshot"):
                for s, sub in zip(seeds, subsets):
                    theta = fewshot_baseline(fx.theta_B, sub, replace(cfg.fewshot, seed=cell_seed(ws, "fewshot", b, s)), fx.spec)
                    test_acc, val_acc, test_loss = ev(theta)
                    rows.append(_row(fields_, world_seed=ws, variant="fewshot", heuristic=heuristic, b=b, seed=s, accuracy=test_acc, val_accuracy=val_acc, loss=test_loss))
            for aggregation in exp.aggregations:
                with _stage("signs"):
                    ests = [estimate_signs(fx.theta_B, sub, fx.spec, aggregation, exp.zero_tol) for sub in subsets]
                    g_subs = [grad(fx.theta_B, sub, fx.spec) for sub in subsets]
                    agree = [_agreement_cols(-e.signs, fx.sign_tau_B) for e in ests]
                with _stage("transport"):
                    for strategy in grad_strategies:
                        masks = [build_mask(strategy, fx.sign_tau_A, e.signs) for e in ests]
                        c = [_curve(fx, ev, m, "gradient_signs", exp.alphas, g) for m, g in zip(masks, g_subs)]
                        extra = [dict(retained_fraction=m.retained_fraction(), **a) for m, a in zip(masks, agree)]
                        group = dict(variant="gradfix", reference="gradient_signs", strategy=strategy, aggregation=aggregation, heuristic=heuristic, b=b)
                        r, cr, _ = _sweep_rows(fx, group, c, seeds, fields_, extra)
                        rows += r
                        curves += cr

    rows.sort(key=_sort_key)
    return ExperimentReport(fields_, rows, curves, cfg.config_hash(), cfg.to_dict())


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_bytes(fields_, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields_)
    for r in rows:
        w.writerow([_cell(r.get(k)) for k in fields_])
    return buf.getvalue().encode("utf-8")


def report_emit(report: ExperimentReport, outdir, formats=("csv", "json"), stem: str = "report") -> list[str]:
    """Write ``<stem>.csv`` / ``<stem>_alpha.csv`` and ``<stem>.json`` atomically."""
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise ConfigError(f"unknown report formats: {sorted(unknown)}")
    os.makedirs(outdir, exist_ok=True)
    paths = []
    if "csv" in formats:
        p = os.path.join(outdir, f"{stem}.csv")
        atomic_write_bytes(p, _csv_bytes(report.fields, report.rows))
        paths.append(p)
        p = os.path.join(outdir, f"{stem}_alpha.csv")
        atomic_write_bytes(p, _csv_bytes(CURVE_FIELDS, report.alpha_curves))
        paths.append(p)
    if "json" in formats:
        doc = {
            "toolkit_version": report.version,
            "config_hash": report.config_hash,
            "config": report.config,
            "fields": list(report.fields),
            "rows": [{k: r.get(k) for k in report.fields} for r in report.rows],
            "alpha_curves": [{k: r.get(k) for k in CURVE_FIELDS} for r in report.alpha_curves],
        }
        p = os.path.join(outdir, f"{stem}.json")
        atomic_write_bytes(p, (json.dumps(doc, indent=1, allow_nan=False) + "\n").encode("utf-8"))
        paths.append(p)
    return paths


def run_and_emit(cfg: ExperimentConfig, outdir=None, formats=("csv", "json")) -> tuple[ExperimentReport, list[str]]:
    """``run_pipeline`` plus report files.

    With ``save_checkpoints`` the stage artifacts go to a staging directory that
    becomes ``checkpoints/`` on success or ``quarantine/`` on a stage failure.
    """
    outdir = outdir or cfg.experiment.output_dir
    staging = None
    if cfg.experiment.save_checkpoints:
        staging = os.path.join(outdir, f".staging-{cfg.config_hash()[:12]}")
        shutil.rmtree(staging, ignore_errors=True)
    try:
        report = run_pipeline(cfg, checkpoint_dir=staging)
    except StageError:
        if staging and os.path.isdir(staging):
            _swap_dir(staging, os.path.join(outdir, "quarantine"))
        raise
    if staging:
        _swap_dir(staging, os.path.join(outdir, "checkpoints"))
    with _stage("report"):
        paths = report_emit(report, outdir, formats)
    return report, paths


def _swap_dir(src, dst):
    shutil.rmtree(dst, ignore_errors=True)
    os.replace(src, dst)
