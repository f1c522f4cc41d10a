"""Command line interface: ``gradfix <subcommand> ...``.

Exit codes: 0 success, 2 config or usage error, 3 numeric or divergence
error, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace

from . import __version__
from .bounds import NoiseChannel, bound_grid, compare_mean_vs_majority, write_bound_csv
from .config import ExperimentConfig, load_config
from .datasets import load_csv, make_world, save_csv
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DatasetFormatError,
    GradFixError,
    NumericError,
    StageError,
)
from .harness import cell_seed, run_and_emit, sweep_alpha
from .model import embed, evaluate, init_params, loss, train
from .param_space import (
    SignVector,
    TaskVector,
    agreement_stats,
    atomic_write_bytes,
    diff,
    load_checkpoint,
    load_mask,
    load_signs,
    save_checkpoint,
    save_mask,
    sign_of,
)
from .selection import HEURISTICS, flatten_selection, select, write_selection_csv
from .signs import save_sign_estimate, estimate_signs
from .transport import MASK_STRATEGIES, REFERENCES, build_delta, build_mask, transport

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _data(path, cfg, split):
    return load_csv(path, cfg.model.input_dim, cfg.model.num_classes, split=split)


def _emit_csv(header, rows, out):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if out:
        atomic_write_bytes(out, buf.getvalue().encode("utf-8"))
    else:
        sys.stdout.write(buf.getvalue())


def cmd_world(args):
    cfg = _cfg(args)
    os.makedirs(args.out, exist_ok=True)
    for split, data in make_world(cfg.world).items():
        save_csv(data, os.path.join(args.out, f"{split}.csv"))


def cmd_pretrain(args):
    cfg = _cfg(args)
    data = _data(args.data, cfg, "pretrain")
    theta0 = init_params(cfg.model, cell_seed(args.seed, "init", args.tag))
    theta = train(theta0, data, replace(cfg.pretrain, seed=cell_seed(args.seed, "pretrain", args.tag)), cfg.model)
    save_checkpoint(theta, args.out)


def cmd_finetune(args):
    cfg = _cfg(args)
    theta0 = load_checkpoint(args.theta)
    data = _data(args.data, cfg, "train")
    theta = train(theta0, data, replace(cfg.finetune, seed=cell_seed(args.seed, "finetune", args.tag)), cfg.model)
    save_checkpoint(theta, args.out)
    if args.tau:
        save_checkpoint(diff(theta, theta0), args.tau)


def _selection(args, cfg, theta, data):
    if args.heuristic == "random" and args.seed is None:
        raise ConfigError("--seed is required for random selection")
    features = None
    if args.heuristic != "random":
        source = load_checkpoint(args.embed_theta) if args.embed_theta else theta
        features = embed(source, data, cfg.model)
    seed = None if args.seed is None else cell_seed(args.seed, "subset", args.budget, 0)
    return select(args.heuristic, args.budget, data=data, features=features, seed=seed, coverage=getattr(args, "coverage", False))


def cmd_select(args):
    cfg = _cfg(args)
    theta = load_checkpoint(args.theta)
    data = _data(args.data, cfg, "train")
    sel = _selection(args, cfg, theta, data)
    if args.out:
        write_selection_csv(sel, args.out)
    else:
        _emit_csv(["class", "rank", "source_id"], [(c, k, s) for c in sorted(sel) for k, s in enumerate(sel[c])], None)


def cmd_signs(args):
    cfg = _cfg(args)
    theta = load_checkpoint(args.theta)
    data = _data(args.data, cfg, "train")
    subset = data.subset(flatten_selection(_selection(args, cfg, theta, data)))
    est = estimate_signs(theta, subset, cfg.model, args.aggregation, cfg.experiment.zero_tol)
    save_sign_estimate(est, args.out)


def _as_signs(path, zero_tol=0.0) -> SignVector:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"GFXS":
        return load_signs(path)
    if magic == b"GFX1":
        return sign_of(load_checkpoint(path), zero_tol)
    raise CheckpointFormatError(f"{path}: expected a sign file or checkpoint, found magic {magic!r}")


def cmd_mask(args):
    cfg = _cfg(args)
    sign_a = sign_of(load_checkpoint(args.tau_a), cfg.experiment.zero_tol)
    ref = None
    if args.strategy != "random":
        if not args.ref:
            raise ConfigError(f"--ref is required for strategy {args.strategy!r}")
        ref = _as_signs(args.ref, cfg.experiment.zero_tol)
    elif args.seed is None:
        raise ConfigError("--seed is required for random masks")
    mask = build_mask(args.strategy, sign_a, ref, seed=args.seed)
    save_mask(mask, args.out)
    print(f"retained_fraction={mask.retained_fraction()!r}")


def cmd_transport(args):
    theta = load_checkpoint(args.theta)
    tau = load_checkpoint(args.tau)
    mask = load_mask(args.mask)
    tau = TaskVector(tau.names, tau.shapes, tau.values)
    out = transport(theta, build_delta(mask, tau, args.alpha), args.reference)
    save_checkpoint(out, args.out)


def cmd_eval(args):
    cfg = _cfg(args)
    theta = load_checkpoint(args.theta)
    data = _data(args.data, cfg, "test")
    print(json.dumps({"accuracy": evaluate(theta, data, cfg.model), "loss": loss(theta, data, cfg.model), "n": len(data)}))


def cmd_pipeline(args):
    cfg = _cfg(args)
    out = args.out or cfg.experiment.output_dir
    _, paths = run_and_emit(cfg, out, tuple(args.formats.split(",")))
    for p in paths:
        print(p)


def cmd_sweep_alpha(args):
    cfg = _cfg(args)
    sweep = sweep_alpha(cfg, args.variant, args.strategy, args.aggregation, args.heuristic, args.budget)
    rows = [(repr(a), repr(v), repr(t), "true" if a == sweep.selected else "false") for a, v, t in zip(sweep.alphas, sweep.val_accuracy, sweep.test_accuracy)]
    _emit_csv(["alpha", "val_accuracy", "test_accuracy", "selected"], rows, args.out)
    if args.variant == "oracle":
        print(f"oracle selects alpha=1: {sweep.selects_one}", file=sys.stderr)


def cmd_boundlab(args):
    if args.compare:
        if args.noise == "student_t" and args.nu is None:
            raise ConfigError("--nu is required for student_t noise")
        ch = NoiseChannel(signal=args.signal, noise=args.noise, sigma=args.sigma, nu=args.nu)
        rows = []
        for N in args.N:
            r = compare_mean_vs_majority(ch, N, args.trials, args.seed)
            rows.append((ch.describe(), N, args.trials, repr(r.rate_majority), repr(r.rate_mean), repr(r.diff), repr(r.diff_interval[0]), repr(r.diff_interval[1])))
        _emit_csv(["channel", "N", "trials", "rate_majority", "rate_mean", "diff", "diff_lo", "diff_hi"], rows, args.out)
        return
    rows = bound_grid(args.p, args.N, args.trials, args.seed)
    if args.out:
        write_bound_csv(rows, args.out)
    else:
        buf = io.StringIO()
        fields = list(rows[0])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
        sys.stdout.write(buf.getvalue())


def cmd_agree(args):
    cfg = _cfg(args)
    a = _as_signs(args.a, cfg.experiment.zero_tol)
    b = _as_signs(args.b, cfg.experiment.zero_tol)
    if args.negate_a:
        a = -a
    stats = agreement_stats(a, b, "whole") + agreement_stats(a, b, "per_segment")
    _emit_csv(["group", "agreement", "n"], [(g, repr(f), n) for g, f, n in stats], args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradfix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gradfix {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help, seed=None):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="sectioned key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config entry")
        if seed is not None:
            sp.add_argument("--seed", type=int, required=seed, help="master seed" + ("" if seed else " (stochastic options only)"))
        sp.set_defaults(fn=fn)
        return sp

    sp = cmd("world", cmd_world, "generate the synthetic datasets as CSV", seed=True)
    sp.add_argument("--out", required=True, help="output directory")

    sp = cmd("pretrain", cmd_pretrain, "pre-train a model from random init", seed=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--tag", default="A", help="name mixed into the seed (A or B)")
    sp.add_argument("--out", required=True)

    sp = cmd("finetune", cmd_finetune, "fine-tune a checkpoint on a dataset", seed=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--tag", default="A")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tau", help="also write the task vector here")

    for name, fn, help in (("signs", cmd_signs, "estimate gradient signs from a supervision subset"), ("select", cmd_select, "select a per-class supervision subset")):
        sp = cmd(name, fn, help, seed=False)
        sp.add_argument("--theta", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--budget", type=int, default=1)
        sp.add_argument("--heuristic", choices=HEURISTICS, default="random")
        sp.add_argument("--embed-theta", dest="embed_theta", help="checkpoint whose penultimate layer embeds the pool (default --theta)")
        sp.add_argument("--out", required=name == "signs")
        if name == "signs":
            sp.add_argument("--aggregation", choices=("majority", "mean"), default="majority")
        else:
            sp.add_argument("--coverage", action="store_true", help="k-center variant of the coreset rule")

    sp = cmd("mask", cmd_mask, "build a mask from sign(tau_A) and reference signs", seed=False)
    sp.add_argument("--tau-a", dest="tau_a", required=True)
    sp.add_argument("--ref", help="sign file or checkpoint whose signs are the reference")
    sp.add_argument("--strategy", choices=MASK_STRATEGIES, default="agreement")
    sp.add_argument("--out", required=True)

    sp = cmd("transport", cmd_transport, "apply a masked task vector to a checkpoint")
    sp.add_argument("--theta", required=True)
    sp.add_argument("--tau", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--reference", choices=REFERENCES, required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("eval", cmd_eval, "accuracy and loss of a checkpoint")
    sp.add_argument("--theta", required=True)
    sp.add_argument("--data", required=True)

    sp = cmd("pipeline", cmd_pipeline, "run the full experiment from a config", seed=True)
    sp.add_argument("--out", help="output directory (default experiment.output_dir)")
    sp.add_argument("--formats", default="csv,json")

    sp = cmd("sweep-alpha", cmd_sweep_alpha, "validation sweep over the alpha grid", seed=True)
    sp.add_argument("--variant", choices=("oracle", "gradfix", "random_mask"), default="oracle")
    sp.add_argument("--strategy", choices=("agreement", "force_agreement"), default="agreement")
    sp.add_argument("--aggregation", choices=("majority", "mean"), default="majority")
    sp.add_argument("--heuristic", choices=HEURISTICS, default="random")
    sp.add_argument("--budget", type=int, default=1)
    sp.add_argument("--out")

    sp = cmd("boundlab", cmd_boundlab, "majority-vote recovery vs the Hoeffding bound", seed=True)
    sp.add_argument("--p", type=float, nargs="+", default=[0.55, 0.6, 0.7, 0.9])
    sp.add_argument("--N", type=int, nargs="+", default=[1, 5, 25, 101])
    sp.add_argument("--trials", type=int, default=100_000)
    sp.add_argument("--compare", action="store_true", help="paired mean-vs-majority comparison")
    sp.add_argument("--signal", type=float, default=0.2)
    sp.add_argument("--noise", choices=("gaussian", "student_t"), default="student_t")
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--nu", type=float, default=2.0)
    sp.add_argument("--out")

    sp = cmd("agree", cmd_agree, "per-segment sign agreement between two files")
    sp.add_argument("a", help="sign file or checkpoint")
    sp.add_argument("b", help="sign file or checkpoint")
    sp.add_argument("--negate-a", action="store_true", help="flip the first signs (gradient vs task-vector convention)")
    sp.add_argument("--out")
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, (OSError, CheckpointFormatError, DatasetFormatError)):
        return EXIT_IO
    if isinstance(exc, (NumericError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, GradFixError, ValueError)):
        return EXIT_CONFIG
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (GradFixError, OSError, ValueError, ArithmeticError) as exc:
        print(f"gradfix {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
