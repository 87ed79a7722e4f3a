"""Command line entry points.

Subcommands: gen, cluster, train, eval-knn, eval-cluster, export,
grad-check, ablate. Exit codes: 0 on success, 1 on runtime failures
(reported with their error category), 2 on usage errors. Outputs are
written atomically (temp file + rename), so re-running a command replaces
files without ever leaving a half-written one. Every run echoes its fully
resolved configuration to stderr.

Thread count comes from ``--threads`` when given, else the
``PROTOHIER_THREADS`` environment variable, else 1.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import report
from .data_io import (
    EmbeddingSet,
    read_embeddings,
    read_labels,
    write_embeddings,
    write_labels,
)
from .errors import ConfigError, ProtohierError
from .evaluate import DEFAULT_K_LIST, KNN_TEMPERATURE, cluster_eval, knn_eval
from .hkmeans import (
    encode_all,
    extract_and_cluster,
    hierarchical_kmeans,
    write_tree,
)
from .model import load_checkpoint
from .prototree import validate_tree
from .spd import spd_grad_check
from .synth import HierarchySpec, generate
from .trainer import TrainConfig, default_epoch_split, train
from .util import atomic_write_text, l2_normalize

THREADS_ENV = "PROTOHIER_THREADS"


def _echo_config(command, pairs):
    rendered = " ".join(f"{k}={v}" for k, v in sorted(pairs.items()))
    print(f"resolved config [{command}]: {rendered}", file=sys.stderr)


def _resolve_threads(value):
    if value is not None:
        threads = value
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from exc
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads


def _int_list(raw):
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from exc


def _float_list(raw):
    try:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated floats, got {raw!r}") from exc


def _load_data(path, format, csv_has_labels=False):
    return read_embeddings(path, format=format, csv_has_labels=csv_has_labels)


def _maybe_encode(embeddings, ckpt):
    """Pass raw rows through a checkpointed encoder when one is given."""
    if not ckpt:
        return embeddings.data
    state = load_checkpoint(ckpt)
    return encode_all(state, embeddings.data)


def _write_csv(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in columns))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------------ gen


def cmd_gen(args):
    branching = _int_list(args.branching)
    depth = args.depth if args.depth is not None else len(branching)
    if args.sep == "auto":
        separation = tuple(3.0 * 0.5**i for i in range(depth))
    else:
        separation = _float_list(args.sep)
    spec = HierarchySpec(
        depth=depth,
        branching=branching,
        samples_per_leaf=args.per_leaf,
        d=args.dim,
        separation=separation,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    _echo_config("gen", {**vars(spec), "out": args.out})
    result = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    emb_path = os.path.join(args.out, "embeddings.bin")
    write_embeddings(result.embeddings, emb_path)
    label_paths = []
    for level, labels in enumerate(result.labels_by_level, start=1):
        path = os.path.join(args.out, f"labels_l{level}.bin")
        write_labels(labels, path)
        label_paths.append(path)
    print(
        f"wrote {result.embeddings.n} x {result.embeddings.d} embeddings to {emb_path}"
    )
    print(f"wrote {len(label_paths)} label files (coarse to fine): {label_paths}")
    return 0


# ------------------------------------------------------------------ cluster


def cmd_cluster(args):
    threads = _resolve_threads(args.threads)
    _echo_config(
        "cluster",
        {
            "data": args.data,
            "format": args.format,
            "levels": args.levels,
            "seed": args.seed,
            "normalize": args.normalize,
            "ckpt": args.ckpt or "",
            "threads": threads,
            "out": args.out,
        },
    )
    embeddings = _load_data(args.data, args.format, args.csv_has_labels)
    levels = _int_list(args.levels)
    if args.ckpt:
        state = load_checkpoint(args.ckpt)
        tree = extract_and_cluster(
            state, embeddings, levels, seed=args.seed, n_threads=threads
        )
    else:
        X = embeddings.data
        if args.normalize:
            X = l2_normalize(X.astype(np.float64))
        tree = hierarchical_kmeans(X, levels, seed=args.seed, n_threads=threads)
    diag = validate_tree(tree)
    if not diag.ok:
        failed = [name for name, ok in diag.checks.items() if not ok]
        raise ConfigError(f"built tree failed validation: {failed}")
    write_tree(tree, args.out)
    print(
        f"tree levels {tree.level_sizes}, {diag.path_count} paths, "
        f"{diag.edge_count} edges -> {args.out}"
    )
    return 0


# ------------------------------------------------------------------ train


TRAIN_FLAG_FIELDS = {
    "batch_size": "batch_size",
    "lr": "lr",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "n_neg": "n_neg",
    "dim": "dim",
    "encoder_hidden": "encoder_hidden",
    "head_hidden": "head_hidden",
    "head_layers": "head_layers",
    "temperature": "temperature",
    "view_noise": "view_noise",
    "seed": "seed",
    "eps_clamp": "eps_clamp",
    "refresh_subsample": "refresh_subsample",
}


def _build_train_config(args):
    """defaults < config file < explicit flags."""
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = TrainConfig.from_text(fh.read())
    else:
        config = TrainConfig()
    overrides = {}
    if args.epochs is not None:
        if args.t1 is not None or args.t2 is not None:
            raise ConfigError("--epochs cannot be combined with --t1/--t2")
        t1, t2 = default_epoch_split(args.epochs)
        overrides["t1_epochs"] = t1
        overrides["t2_epochs"] = t2
    if args.t1 is not None:
        overrides["t1_epochs"] = args.t1
    if args.t2 is not None:
        overrides["t2_epochs"] = args.t2
    if args.levels is not None:
        overrides["level_sizes"] = _int_list(args.levels)
    for flag, field in TRAIN_FLAG_FIELDS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    if args.norm is not None:
        overrides["use_norm"] = args.norm
    if args.spd is not None:
        overrides["spd_enabled"] = args.spd
    overrides["threads"] = _resolve_threads(args.threads)
    overrides["data_path"] = args.data
    overrides["labels_path"] = args.labels or ""
    os.makedirs(args.out, exist_ok=True)
    overrides["ckpt_path"] = os.path.join(args.out, "checkpoint.bin")
    overrides["metrics_path"] = os.path.join(args.out, "metrics.csv")
    from dataclasses import replace

    return replace(config, **overrides)


def cmd_train(args):
    config = _build_train_config(args)
    embeddings = _load_data(config.data_path, args.format, args.csv_has_labels)
    resolved = dict(
        line.split("=", 1) for line in config.to_text().strip().splitlines()
    )
    _echo_config("train", resolved)
    state, rows = train(config, embeddings, resume_from=args.resume)
    if not args.no_figures:
        fig_path = os.path.join(args.out, "loss_curves.png")
        report.plot_training_curves(rows, fig_path, stage_boundary=config.t1_epochs)
    last = rows[-1] if rows else {"img_loss": 0.0, "spd_loss": 0.0, "total": 0.0}
    print(
        f"trained {state.epoch} epochs: img={last['img_loss']:.4f} "
        f"spd={last['spd_loss']:.4f} total={last['total']:.4f}"
    )
    print(f"checkpoint: {config.ckpt_path}")
    print(f"metrics: {config.metrics_path}")
    return 0


# ------------------------------------------------------------------ eval


def cmd_eval_knn(args):
    threads = _resolve_threads(args.threads)
    k_list = _int_list(args.k)
    _echo_config(
        "eval-knn",
        {
            "train_data": args.train_data,
            "train_labels": args.train_labels or "(embedded)",
            "test_data": args.test_data,
            "test_labels": args.test_labels or "(embedded)",
            "ckpt": args.ckpt or "",
            "k": args.k,
            "temperature": args.temperature,
            "threads": threads,
            "out": args.out,
        },
    )
    train_set = _load_data(args.train_data, args.format, args.csv_has_labels)
    test_set = _load_data(args.test_data, args.format, args.csv_has_labels)
    train_labels = (
        read_labels(args.train_labels) if args.train_labels else train_set.labels
    )
    test_labels = read_labels(args.test_labels) if args.test_labels else test_set.labels
    if train_labels is None or test_labels is None:
        raise ConfigError("labels are required: pass label files or embed them")
    train_z = _maybe_encode(train_set, args.ckpt)
    test_z = _maybe_encode(test_set, args.ckpt)
    result = knn_eval(
        train_z, train_labels, test_z, test_labels,
        k_list=k_list, temperature=args.temperature,
    )
    for k in k_list:
        print(f"k={k:>5d}  accuracy={result.per_k[k]:.4f}")
    print(f"best: k={result.best_k} accuracy={result.best_accuracy:.4f}")
    columns = ["best_k", "best_accuracy"] + [f"k{k}" for k in k_list]
    row = {"best_k": result.best_k, "best_accuracy": repr(result.best_accuracy)}
    for k in k_list:
        row[f"k{k}"] = repr(result.per_k[k])
    _write_csv(args.out, columns, [row])
    return 0


def cmd_eval_cluster(args):
    threads = _resolve_threads(args.threads)
    _echo_config(
        "eval-cluster",
        {
            "data": args.data,
            "labels": args.labels or "(embedded)",
            "ckpt": args.ckpt or "",
            "k": args.k if args.k is not None else "(n classes)",
            "seed": args.seed,
            "restarts": args.restarts,
            "threads": threads,
            "out": args.out,
        },
    )
    data = _load_data(args.data, args.format, args.csv_has_labels)
    labels = read_labels(args.labels) if args.labels else data.labels
    if labels is None:
        raise ConfigError("labels are required: pass a label file or embed them")
    k = args.k if args.k is not None else int(labels.max()) + 1
    z = _maybe_encode(data, args.ckpt)
    result = cluster_eval(
        z, labels, k, seed=args.seed, restarts=args.restarts, n_threads=threads
    )
    print(
        f"k={k} accuracy={result.accuracy:.4f} nmi={result.nmi:.4f} ami={result.ami:.4f}"
    )
    _write_csv(
        args.out,
        ["k", "accuracy", "nmi", "ami"],
        [
            {
                "k": k,
                "accuracy": repr(result.accuracy),
                "nmi": repr(result.nmi),
                "ami": repr(result.ami),
            }
        ],
    )
    return 0


def cmd_export(args):
    _echo_config(
        "export", {"data": args.data, "ckpt": args.ckpt, "out": args.out}
    )
    data = _load_data(args.data, args.format, args.csv_has_labels)
    state = load_checkpoint(args.ckpt)
    z = encode_all(state, data.data)
    write_embeddings(EmbeddingSet(data=z.astype(np.float32)), args.out)
    print(f"wrote {z.shape[0]} x {z.shape[1]} representations to {args.out}")
    return 0


# ------------------------------------------------------------------ grad-check


def cmd_grad_check(args):
    _echo_config(
        "grad-check",
        {"trials": args.trials, "tol": args.tol, "step": args.step, "seed": args.seed},
    )
    result = spd_grad_check(
        trials=args.trials, tolerance=args.tol, step=args.step, seed=args.seed
    )
    print(
        f"{result.trials} trials, max relative error {result.max_rel_error:.3e} "
        f"(tolerance {result.tolerance:.1e}, step {result.step:.1e})"
    )
    print(f"worst case: {result.worst}")
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


# ------------------------------------------------------------------ ablate


def _leaf_split(n_leaves, per_leaf, test_fraction):
    """Per-leaf train/test index split for leaf-ordered planted data."""
    test_count = max(1, int(round(per_leaf * test_fraction)))
    if test_count >= per_leaf:
        raise ConfigError("test fraction leaves no training samples per leaf")
    train_idx = []
    test_idx = []
    for leaf in range(n_leaves):
        start = leaf * per_leaf
        train_idx.extend(range(start, start + per_leaf - test_count))
        test_idx.extend(range(start + per_leaf - test_count, start + per_leaf))
    return np.asarray(train_idx), np.asarray(test_idx)


def cmd_ablate(args):
    threads = _resolve_threads(args.threads)
    branching = _int_list(args.branching)
    levels = _int_list(args.levels)
    neg_list = _int_list(args.neg_paths)
    k_list = _int_list(args.k)
    depth = len(branching)
    if args.sep == "auto":
        separation = tuple(3.0 * 0.5**i for i in range(depth))
    else:
        separation = _float_list(args.sep)
    _echo_config(
        "ablate",
        {
            "branching": args.branching,
            "per_leaf": args.per_leaf,
            "dim": args.dim,
            "noise": args.noise,
            "levels": args.levels,
            "neg_paths": args.neg_paths,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "seed": args.seed,
            "threads": threads,
            "out": args.out,
        },
    )
    spec = HierarchySpec(
        depth=depth,
        branching=branching,
        samples_per_leaf=args.per_leaf,
        d=args.dim,
        separation=separation,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    result = generate(spec)
    X = result.embeddings.data
    leaf_labels = result.labels_by_level[-1]
    train_idx, test_idx = _leaf_split(
        spec.n_leaves, spec.samples_per_leaf, args.test_fraction
    )
    t1, t2 = default_epoch_split(args.epochs)

    fixed_neg = sorted(neg_list)[len(neg_list) // 2]
    sweeps = []
    for i in range(len(levels)):
        sweeps.append(("structure", levels[: i + 1], fixed_neg))
    for n_neg in neg_list:
        if n_neg != fixed_neg:
            sweeps.append(("negatives", levels, n_neg))

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for axis, structure, n_neg in sweeps:
        config = TrainConfig(
            t1_epochs=t1,
            t2_epochs=t2,
            batch_size=args.batch_size,
            lr=args.lr,
            level_sizes=tuple(structure),
            n_neg=n_neg,
            dim=args.dim,
            seed=args.seed,
            threads=threads,
        )
        started = time.perf_counter()
        state, _ = train(config, X[train_idx])
        train_seconds = time.perf_counter() - started
        train_z = encode_all(state, X[train_idx])
        test_z = encode_all(state, X[test_idx])
        knn = knn_eval(
            train_z, leaf_labels[train_idx], test_z, leaf_labels[test_idx],
            k_list=k_list,
        )
        clus = cluster_eval(
            test_z, leaf_labels[test_idx], spec.n_leaves,
            seed=args.seed, n_threads=threads,
        )
        rows.append(
            {
                "axis": axis,
                "structure": "-".join(str(m) for m in structure),
                "n_neg": n_neg,
                "knn_best_k": knn.best_k,
                "knn_accuracy": knn.best_accuracy,
                "nmi": clus.nmi,
                "ami": clus.ami,
                "train_seconds": round(train_seconds, 3),
            }
        )
        print(
            f"[{axis}] structure={rows[-1]['structure']} n_neg={n_neg} "
            f"knn={knn.best_accuracy:.4f} nmi={clus.nmi:.4f} ami={clus.ami:.4f}"
        )
    csv_path = os.path.join(args.out, "ablate.csv")
    columns = [
        "axis", "structure", "n_neg", "knn_best_k",
        "knn_accuracy", "nmi", "ami", "train_seconds",
    ]
    _write_csv(csv_path, columns, rows)
    print(f"comparison table: {csv_path}")
    if not args.no_figures:
        fig_path = os.path.join(args.out, "ablate.png")
        report.plot_ablation(rows, fig_path)
        print(f"comparison figure: {fig_path}")
    return 0


# ------------------------------------------------------------------ parser


def _add_format_flags(sub):
    sub.add_argument("--format", choices=("binary", "csv"), default="binary",
                     help="input embedding file format")
    sub.add_argument("--csv-has-labels", action="store_true",
                     help="treat the final CSV column as an integer label")


def _add_threads_flag(sub):
    sub.add_argument("--threads", type=int, default=None,
                     help=f"worker threads (default: ${THREADS_ENV} or 1)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protohier",
        description="Hierarchical prototype representation learning on embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate planted hierarchical data")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--branching", required=True, help="e.g. 4,3,2 (coarse to fine)")
    p.add_argument("--per-leaf", type=int, default=50)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sep", default="auto", help="per-level separations, e.g. 3.0,1.5,0.75")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("cluster", help="build a prototype tree from embeddings")
    p.add_argument("--data", required=True)
    _add_format_flags(p)
    p.add_argument("--levels", required=True, help="e.g. 24,8,4 (bottom first)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ckpt", default=None, help="encode rows with this checkpoint first")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    _add_threads_flag(p)
    p.add_argument("--out", required=True, help="tree file to write")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="two-stage representation training")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--data", required=True)
    _add_format_flags(p)
    p.add_argument("--labels", default=None)
    p.add_argument("--epochs", type=int, default=None,
                   help="total epochs; stage split defaults to 1:10 warmup")
    p.add_argument("--t1", type=int, default=None, help="stage-one epochs")
    p.add_argument("--t2", type=int, default=None, help="stage-two epochs")
    p.add_argument("--levels", default=None, help="e.g. 24,8,4")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--n-neg", dest="n_neg", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--encoder-hidden", dest="encoder_hidden", type=int, default=None)
    p.add_argument("--head-hidden", dest="head_hidden", type=int, default=None)
    p.add_argument("--head-layers", dest="head_layers", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--view-noise", dest="view_noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eps-clamp", dest="eps_clamp", type=float, default=None)
    p.add_argument("--refresh-subsample", dest="refresh_subsample", type=int, default=None)
    p.add_argument("--norm", action=argparse.BooleanOptionalAction, default=None,
                   help="batch normalization in projection heads")
    p.add_argument("--spd", action=argparse.BooleanOptionalAction, default=None,
                   help="path-discrimination loss in stage two")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_threads_flag(p)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-knn", help="weighted KNN classification accuracy")
    p.add_argument("--train-data", required=True)
    p.add_argument("--train-labels", default=None)
    p.add_argument("--test-data", required=True)
    p.add_argument("--test-labels", default=None)
    _add_format_flags(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--k", default=",".join(str(k) for k in DEFAULT_K_LIST))
    p.add_argument("--temperature", type=float, default=KNN_TEMPERATURE)
    _add_threads_flag(p)
    p.add_argument("--out", default="knn_eval.csv")
    p.set_defaults(func=cmd_eval_knn)

    p = sub.add_parser("eval-cluster", help="clustering accuracy / NMI / AMI")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default=None)
    _add_format_flags(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--k", type=int, default=None, help="clusters (default: #classes)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    _add_threads_flag(p)
    p.add_argument("--out", default="cluster_eval.csv")
    p.set_defaults(func=cmd_eval_cluster)

    p = sub.add_parser("export", help="write raw encoder outputs as embeddings")
    p.add_argument("--data", required=True)
    _add_format_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("grad-check", help="finite-difference check of loss gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="level-count and negative-count sweeps")
    p.add_argument("--branching", default="4,3,2")
    p.add_argument("--per-leaf", type=int, default=100)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sep", default="auto")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--levels", default="24,8,4")
    p.add_argument("--neg-paths", dest="neg_paths", default="4,16,64")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--k", default="10,20", help="KNN sizes for the sweep table")
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    _add_threads_flag(p)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtohierError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[os]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
