"""Command-line interface: generate data, train, evaluate, sweep.

Machine-readable output goes to stdout, diagnostics and progress to stderr.
Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import os
import sys


def _cap_threads():
    raw = os.environ.get("HPL_THREADS", "").strip()
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        print(f"warning: ignoring non-integer HPL_THREADS={raw!r}", file=sys.stderr)
        return
    if n < 1:  # 0 means auto: leave library defaults alone
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(var, str(n))


# BLAS libraries read their thread-count variables when numpy first loads,
# so the cap must be in place before any numpy-importing module below.
_cap_threads()

import argparse
import time

import numpy as np

from .core import Rng
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_classes,
)
from .errors import ContractError, HplError
from .evaluation import embed_dataset, evaluate
from .losses import VALID_KINDS, LossConfig
from .network import DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM
from .trainer import TrainConfig, load_checkpoint, log_line, save_checkpoint, train


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def cmd_generate(args, parser) -> int:
    if (args.split_fraction is None) != (args.train_out is None) or (
        args.split_fraction is None
    ) != (args.test_out is None):
        parser.error("--split-fraction, --train-out and --test-out go together")
    try:
        spec = SyntheticSpec(
            num_super=args.num_super,
            classes_per_super=args.classes_per_super,
            samples_per_class=args.samples_per_class,
            dim=args.dim,
            super_spread=args.super_spread,
            class_spread=args.class_spread,
            noise=args.noise,
        )
        rng = Rng(args.seed)
    except ContractError as exc:
        parser.error(str(exc))
    dataset = generate_synthetic(spec, rng)
    save_dataset(dataset, args.out)
    if args.split_fraction is not None:
        try:
            train_ds, test_ds = split_classes(dataset, args.split_fraction, rng)
        except ContractError as exc:
            parser.error(str(exc))
        save_dataset(train_ds, args.train_out)
        save_dataset(test_ds, args.test_out)
    print(
        f"samples={dataset.num_samples}\tclasses={dataset.num_classes}"
        f"\tsupers={dataset.num_superclasses}"
    )
    return 0


def _usage_error(parser, message):
    """Flag-shape problems are usage errors on the direct commands; inside a
    sweep (parser=None) they surface as ContractError so the run is counted
    as failed and the sweep continues."""
    if parser is None:
        raise ContractError(message)
    parser.error(message)


def _resolve_levels(args, dataset, parser):
    coarse = args.coarse
    if coarse is None:
        if args.gt_hierarchy:
            if dataset.gt_coarse is None:
                raise ContractError(
                    "--gt-hierarchy needs a dataset with a #coarse header"
                )
            coarse = [dataset.num_superclasses]
        else:
            coarse = [4]
    if coarse == [0]:
        sizes = (dataset.num_classes,)
        weights = (1.0,)
    else:
        if 0 in coarse:
            _usage_error(parser, "--coarse 0 means single-level and cannot be combined")
        omega = args.omega1
        if len(omega) != len(coarse):
            _usage_error(
                parser,
                f"--omega1 needs one weight per coarse level "
                f"({len(coarse)}), got {len(omega)}",
            )
        sizes = (dataset.num_classes, *coarse)
        weights = (1.0, *omega)
    if args.levels is not None and args.levels != len(sizes):
        _usage_error(parser, f"--levels {args.levels} contradicts {len(sizes)} actual levels")
    return sizes, weights


def _config_from_args(args, dataset, parser, **overrides) -> TrainConfig:
    sizes, weights = _resolve_levels(args, dataset, parser)
    try:
        loss = LossConfig(kind=args.loss, alpha=args.alpha, delta=args.delta)
        fields = dict(
            level_sizes=sizes,
            epochs=args.epochs,
            warmup_epochs=args.warmup,
            batch_size=args.batch,
            lr=args.lr,
            proxy_lr_multiplier=args.proxy_lr_mult,
            update_period=args.update_period,
            loss_weights=weights,
            loss=loss,
            seed=args.seed,
            embed_dim=args.embed_dim,
            hidden_dim=args.hidden_dim,
            use_gt_hierarchy=args.gt_hierarchy,
        )
        fields.update(overrides)
        return TrainConfig(**fields)
    except ContractError as exc:
        if parser is None:
            raise
        parser.error(str(exc))


def _final_metrics_line(report, ks) -> str:
    parts = [f"recall@{k}={report.recall_at[k]:.6f}" for k in ks]
    parts.append(f"r_precision={report.r_precision:.6f}")
    parts.append(f"map_at_r={report.map_at_r:.6f}")
    parts.append(f"num_queries={report.num_queries}")
    return "\t".join(parts)


def cmd_train(args, parser) -> int:
    dataset = load_dataset(args.data)
    if args.gt_hierarchy and dataset.gt_coarse is None:
        raise ContractError("--gt-hierarchy needs a dataset with a #coarse header")
    cfg = _config_from_args(args, dataset, parser)
    print(f"config\t{cfg}", file=sys.stderr)

    resume = load_checkpoint(args.resume) if args.resume else None
    log_file = open(args.out_log, "w", encoding="utf-8") if args.out_log else None

    def on_iteration(rec):
        line = log_line(rec)
        print(line)
        if log_file is not None:
            log_file.write(line + "\n")

    def on_epoch(rec):
        msg = f"epoch {rec.epoch}\tmean_loss={rec.mean_total_loss:.6f}"
        if rec.recall_at_1 is not None:
            msg += (
                f"\trecall@1={rec.recall_at_1:.6f}"
                f"\tr_precision={rec.r_precision:.6f}"
                f"\tmap_at_r={rec.map_at_r:.6f}"
            )
        print(msg, file=sys.stderr)

    started = time.perf_counter()
    try:
        result = train(
            dataset, cfg,
            resume=resume,
            iteration_hook=on_iteration,
            epoch_hook=on_epoch,
        )
    finally:
        if log_file is not None:
            log_file.close()
    wall = time.perf_counter() - started
    print(f"done in {wall:.1f}s\tseed={cfg.seed}", file=sys.stderr)

    if args.out_checkpoint:
        save_checkpoint(args.out_checkpoint, result.checkpoint())
        print(f"checkpoint written to {args.out_checkpoint}", file=sys.stderr)
    if args.eval_data:
        eval_ds = load_dataset(args.eval_data)
        emb = embed_dataset(result.net, eval_ds.features)
        report = evaluate(emb, eval_ds.labels, ks=args.k, same_set=True)
        print("final\t" + _final_metrics_line(report, args.k))
    return 0


def cmd_eval(args, parser) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    query = load_dataset(args.query)
    q_emb = embed_dataset(ckpt.net, query.features)
    if args.same_set:
        report = evaluate(q_emb, query.labels, ks=args.k, same_set=True)
    else:
        gallery = load_dataset(args.gallery)
        g_emb = embed_dataset(ckpt.net, gallery.features)
        report = evaluate(
            q_emb, query.labels, g_emb, gallery.labels, ks=args.k, same_set=False
        )
    print(_final_metrics_line(report, args.k))
    print("metric\tvalue", file=sys.stderr)
    for k in args.k:
        print(f"recall@{k}\t{report.recall_at[k]:.6f}", file=sys.stderr)
    print(f"r_precision\t{report.r_precision:.6f}", file=sys.stderr)
    print(f"map_at_r\t{report.map_at_r:.6f}", file=sys.stderr)
    print(f"num_queries\t{report.num_queries}", file=sys.stderr)
    return 0


def _ci95(values) -> float:
    if len(values) < 2:
        return 0.0
    return 1.96 * float(np.std(values, ddof=1)) / float(np.sqrt(len(values)))


def run_sweep(train_ds, eval_ds, base_args, param, values, repeats):
    """Train+eval per (value, seed) with seeds paired across values.

    Returns one row dict per value; individual run failures are counted in
    the row and reported on stderr, and the sweep keeps going.
    """
    rows = []
    for value in values:
        r1s, maps, failures = [], [], 0
        for r in range(repeats):
            seed = base_args.seed + r
            if param == "omega1":
                base_args.omega1 = [float(value)]
                overrides = dict(seed=seed, epoch_metrics=False)
            else:
                base_args.coarse = [int(value)]
                overrides = dict(seed=seed, epoch_metrics=False)
            try:
                cfg = _config_from_args(base_args, train_ds, None, **overrides)
                result = train(train_ds, cfg)
                emb = embed_dataset(result.net, eval_ds.features)
                report = evaluate(emb, eval_ds.labels, ks=(1,), same_set=True)
                r1s.append(report.recall_at[1])
                maps.append(report.map_at_r)
            except HplError as exc:
                failures += 1
                print(f"sweep {param}={value} seed={seed} failed: {exc}", file=sys.stderr)
        rows.append(
            dict(
                value=value,
                runs_ok=len(r1s),
                runs_failed=failures,
                mean_recall_at_1=float(np.mean(r1s)) if r1s else float("nan"),
                ci95_recall_at_1=_ci95(r1s),
                mean_map_at_r=float(np.mean(maps)) if maps else float("nan"),
                ci95_map_at_r=_ci95(maps),
            )
        )
    return rows


def cmd_sweep(args, parser) -> int:
    if args.repeats < 1:
        parser.error("--repeats must be at least 1")
    if not args.values:
        parser.error("--values must name at least one value")
    if args.param == "omega1":
        try:
            values = [float(t) for t in args.values.split(",")]
        except ValueError:
            parser.error(f"--values must be numbers, got {args.values!r}")
    else:
        try:
            values = [int(t) for t in args.values.split(",")]
        except ValueError:
            parser.error(f"--values must be integers, got {args.values!r}")
    train_ds = load_dataset(args.data)
    eval_ds = load_dataset(args.eval_data)
    print(
        "#value\truns_ok\truns_failed\tmean_recall@1\tci95_recall@1"
        "\tmean_map_at_r\tci95_map_at_r"
    )
    for row in run_sweep(train_ds, eval_ds, args, args.param, values, args.repeats):
        print(
            f"{row['value']}\t{row['runs_ok']}\t{row['runs_failed']}"
            f"\t{row['mean_recall_at_1']:.6f}\t{row['ci95_recall_at_1']:.6f}"
            f"\t{row['mean_map_at_r']:.6f}\t{row['ci95_map_at_r']:.6f}"
        )
    return 0


def _add_train_flags(sub):
    sub.add_argument("--data", required=True, help="training dataset file")
    sub.add_argument("--loss", choices=VALID_KINDS, default="nca")
    sub.add_argument("--levels", type=int, default=None,
                     help="expected total level count (sanity check)")
    sub.add_argument("--coarse", type=_int_list, default=None,
                     help="coarse level sizes, e.g. 4 or 8,4; 0 = single level")
    sub.add_argument("--omega1", type=_float_list, default=[0.1],
                     help="loss weight per coarse level")
    sub.add_argument("--epochs", type=int, default=30)
    sub.add_argument("--warmup", type=int, default=3)
    sub.add_argument("--lr", type=float, default=1e-4)
    sub.add_argument("--batch", type=int, default=32)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--alpha", type=float, default=32.0)
    sub.add_argument("--delta", type=float, default=0.1)
    sub.add_argument("--proxy-lr-mult", type=float, default=1.0)
    sub.add_argument("--update-period", type=int, default=None,
                     help="iterations between pyramid refreshes (default: one epoch)")
    sub.add_argument("--embed-dim", type=int, default=DEFAULT_EMBED_DIM)
    sub.add_argument("--hidden-dim", type=int, default=DEFAULT_HIDDEN_DIM)
    sub.add_argument("--gt-hierarchy", action="store_true",
                     help="freeze the class-to-superclass assignment to the dataset's")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpl",
        description="Proxy-based deep metric learning with a hierarchical proxy loss.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("generate", help="write a synthetic hierarchical dataset")
    gen.add_argument("--num-super", type=int, default=8)
    gen.add_argument("--classes-per-super", type=int, default=8)
    gen.add_argument("--samples-per-class", type=int, default=20)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--super-spread", type=float, default=10.0)
    gen.add_argument("--class-spread", type=float, default=1.0)
    gen.add_argument("--noise", type=float, default=0.3)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--split-fraction", type=float, default=None,
                     help="also write a class-disjoint train/test split")
    gen.add_argument("--train-out", default=None)
    gen.add_argument("--test-out", default=None)
    gen.set_defaults(func=cmd_generate)

    tr = subs.add_parser("train", help="train a model")
    _add_train_flags(tr)
    tr.add_argument("--out-checkpoint", default=None)
    tr.add_argument("--out-log", default=None, help="also write iteration lines here")
    tr.add_argument("--eval-data", default=None,
                    help="after training, evaluate same-set retrieval on this file")
    tr.add_argument("--k", type=_int_list, default=[1, 2, 4, 8])
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--query", required=True, help="query dataset file")
    mode = ev.add_mutually_exclusive_group(required=True)
    mode.add_argument("--gallery", default=None, help="gallery dataset file")
    mode.add_argument("--same-set", action="store_true",
                      help="query set retrieves against itself, self excluded")
    ev.add_argument("--k", type=_int_list, default=[1, 2, 4, 8])
    ev.set_defaults(func=cmd_eval)

    sw = subs.add_parser("sweep", help="train+eval across a parameter grid")
    _add_train_flags(sw)
    sw.add_argument("--eval-data", required=True)
    sw.add_argument("--param", choices=("omega1", "coarse"), required=True)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--repeats", type=int, default=1,
                    help="seeds seed..seed+repeats-1, paired across values")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except HplError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
