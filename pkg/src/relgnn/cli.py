"""Command-line front end: build-graph, gen-synth, make-folds, train, eval, gradcheck.

Exit codes: 0 success, 1 I/O error, 2 validation error, 3 numeric failure.
``RELGNN_SEED`` overrides the seed of a config file; an explicit ``--seed``
flag overrides both.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import (DatasetManifest, SyntheticConfig, generate_synthetic, load_dataset, load_labels,
                   write_synthetic)
from .errors import NumericError, ParseError, UndefinedMetricError, ValidationError
from .graph import PriorEdgeList, bp4d_priors, build_graph, graph_to_json
from .model import gradcheck_suite
from .objective import average_reports, roc_points
from .trainer import Checkpoint, TrainConfig, evaluate, predict, train

logger = logging.getLogger("relgnn")

HELP_WIDTH = 88
EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Help text at a fixed width so output does not depend on the terminal."""

    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _env_seed() -> int | None:
    raw = os.environ.get("RELGNN_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"RELGNN_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(flag: int | None, config_seed: int) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return env if env is not None else config_seed


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}: line {exc.lineno} column {exc.colno}") from None


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def resolve_priors(spec: str | None, au_ids) -> PriorEdgeList | None:
    """``none`` / ``bp4d`` / path to a priors JSON file.

    The built-in BP4D list is restricted to pairs whose AUs are present; a
    user file is applied strictly.
    """
    if spec is None or spec == "none":
        return None
    if spec == "bp4d":
        present = set(au_ids)
        full = bp4d_priors()
        keep = lambda edges: [e for e in edges if e.src in present and e.dst in present]
        pri = PriorEdgeList(keep(full.positive), keep(full.negative))
        dropped = len(full.positive) + len(full.negative) - len(pri.positive) - len(pri.negative)
        if dropped:
            logger.info("bp4d priors: %d pair(s) skipped, AUs not in label set", dropped)
        return pri
    return PriorEdgeList.from_json(Path(spec).read_text())


def _threads(n: int):
    if n < 1:
        raise ValidationError(f"--threads must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:                      # optional; numpy still runs
        logger.warning("threadpoolctl not installed; --threads has no effect")
        return nullcontext()
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_build_graph(args) -> int:
    au_ids = args.au or None
    labels = load_labels(args.labels, au_ids, args.intensity, args.c_level)
    priors = resolve_priors(args.priors, labels.au_ids)
    graph = build_graph(labels, args.p_pos, args.p_neg, priors)
    _write_text(args.out, graph_to_json(graph))
    n_pos = int(graph.a_pos.sum())
    n_neg = int(graph.a_neg.sum())
    print(f"wrote {args.out}: {len(labels.au_ids)} AUs, {n_pos} positive, {n_neg} negative edges")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    obj = _read_json(args.config)
    obj["seed"] = _resolve_seed(args.seed, obj.get("seed", 0))
    cfg = SyntheticConfig.from_obj(obj)
    ds = generate_synthetic(cfg)
    manifest = write_synthetic(ds, args.out, args.name, args.k, args.fold_seed)
    _write_text(Path(args.out) / "synth_config.json", _dump(cfg.to_obj()))
    print(f"wrote {args.out}: {ds.labels.num_samples} samples, {len(manifest.folds)} subjects, "
          f"{args.k} folds")
    return EXIT_OK


def cmd_make_folds(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    seed = _resolve_seed(args.seed, 0)
    updated = manifest.with_folds(args.k, seed)
    out = args.out or args.manifest
    _write_text(out, updated.to_json())
    sizes = np.bincount(list(updated.folds.values()), minlength=args.k).tolist()
    print(f"wrote {out}: fold sizes {sizes} (subjects)")
    return EXIT_OK


TRAIN_FLAGS = {
    "variant": "model_variant", "lr": "learning_rate", "epochs": "max_epochs",
    "patience": "patience", "batch_size": "batch_size", "dim": "D", "steps": "T",
    "branch_channels": "branch_channels", "loss": "loss", "p_pos": "p_pos", "p_neg": "p_neg",
    "val_fraction": "val_fraction",
}


def _train_config(args, au_ids) -> TrainConfig:
    obj = _read_json(args.config) if args.config else {}
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            obj[key] = value
    if args.freeze:
        obj["freeze"] = list(args.freeze)
    if args.priors is not None:
        pri = resolve_priors(args.priors, au_ids)
        obj["priors"] = pri.to_obj() if pri is not None else None
    obj["seed"] = _resolve_seed(args.seed, obj.get("seed", 0))
    return TrainConfig.from_obj(obj)


def _parse_folds(value: str | None, k: int) -> list[int] | None:
    if value is None:
        return None
    if value == "all":
        return list(range(k))
    try:
        fold = int(value)
    except ValueError:
        raise ValidationError(f"fold must be an integer or 'all', got {value!r}") from None
    if not 0 <= fold < k:
        raise ValidationError(f"fold {fold} outside 0..{k - 1}")
    return [fold]


def _save_run(out: Path, res, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "history.csv", res.history.to_csv())
    _write_text(out / "batch_orders.json", json.dumps(res.history.batch_orders) + "\n")
    res.checkpoint.save(out / "checkpoint")
    if res.checkpoint.graph is not None:
        _write_text(out / "graph.json", graph_to_json(res.checkpoint.graph))
    _write_text(out / "report.json", report.to_json())


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    ds = load_dataset(manifest)
    cfg = _train_config(args, ds.labels.au_ids)
    k = max(ds.folds.values()) + 1
    folds = _parse_folds(args.fold, k) or [cfg.test_fold]
    init = dict(Checkpoint.load(args.init).params) if args.init else None
    out = Path(args.out)
    reports = []
    for fold in folds:
        fold_cfg = TrainConfig.from_obj({**cfg.to_obj(), "test_fold": fold})
        res = train(ds, fold_cfg, init)
        report = evaluate(res.checkpoint, ds)
        reports.append(report)
        target = out / f"fold{fold}" if len(folds) > 1 else out
        _save_run(target, res, report)
        print(f"fold {fold}: {len(res.history.epochs)} epochs, best epoch "
              f"{res.history.best_epoch}, test macro-F1 {report.macro_f1:.4f}")
    if len(folds) > 1:
        avg = average_reports(reports)
        _write_text(out / "report.json", avg.to_json())
        print(f"average test macro-F1 {avg.macro_f1:.4f}")
    return EXIT_OK


def _checkpoint_dirs(path: Path, folds: list[int] | None) -> list[tuple[int | None, Path]]:
    """Locate checkpoints under a checkpoint dir, a train output dir, or a multi-fold run."""
    if (path / "params.rga").exists():
        return [(None, path)]
    if (path / "checkpoint" / "params.rga").exists():
        return [(None, path / "checkpoint")]
    found = sorted((int(p.name[4:]), p / "checkpoint") for p in path.glob("fold*")
                   if p.name[4:].isdigit() and (p / "checkpoint" / "params.rga").exists())
    if not found:
        raise FileNotFoundError(f"no checkpoint under {path}")
    if folds is not None:
        have = {f for f, _ in found}
        missing = sorted(set(folds) - have)
        if missing:
            raise ValidationError(f"run directory has no checkpoints for folds {missing}")
        found = [(f, p) for f, p in found if f in folds]
    return found


def _roc_rows(ckpt: Checkpoint, ds, idx, fold) -> list[list]:
    mcfg = ckpt.model_config()
    adjacency = ckpt.graph.A if ckpt.graph is not None else None
    probs = predict(ckpt.registry(), mcfg, ds, idx, ckpt.centers, adjacency)
    rows = []
    for k, au in enumerate(ckpt.au_ids):
        try:
            pts = roc_points(probs[:, k], ds.labels.rows[idx, k])
        except UndefinedMetricError:
            continue
        rows.extend([fold, f"AU{au}", repr(float(t)), repr(float(f)), repr(float(r))]
                    for t, f, r in pts)
    return rows


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    ds = load_dataset(manifest)
    k = max(ds.folds.values()) + 1
    folds = _parse_folds(args.folds, k)
    located = _checkpoint_dirs(Path(args.checkpoint), folds)
    jobs = []
    if len(located) == 1 and located[0][0] is None:
        ckpt = Checkpoint.load(located[0][1])
        if folds is not None and len(folds) > 1:
            raise ValidationError("--folds all needs a run directory from 'train --fold all' "
                                  "(one checkpoint per test fold)")
        fold = folds[0] if folds else ckpt.config.test_fold
        jobs.append((fold, ckpt))
    else:
        jobs = [(f, Checkpoint.load(p)) for f, p in located]
    reports, roc = [], []
    for fold, ckpt in jobs:
        rep = evaluate(ckpt, ds, fold=fold)
        reports.append(rep)
        print(f"fold {fold}: macro-F1 {rep.macro_f1:.4f}")
        if args.roc:
            roc.extend(_roc_rows(ckpt, ds, ds.fold_indices(fold), fold))
    final = reports[0] if len(reports) == 1 else average_reports(reports)
    if len(reports) > 1:
        print(f"average macro-F1 {final.macro_f1:.4f}")
    if args.out:
        _write_text(args.out, final.to_json())
    else:
        sys.stdout.write(final.to_json())
    if args.roc:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "au", "threshold", "fpr", "tpr"])
        w.writerows(roc)
        _write_text(args.roc, buf.getvalue())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed, 1)
    rep = gradcheck_suite(seed, args.epsilon, args.tolerance, num_aus=args.num_aus, dim=args.dim,
                          samples=args.samples, branch_channels=args.branch_channels)
    groups = rep.group_max(2)
    for name, err in groups.items():
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name:<14} {err:.3e} {status}")
    print(f"worst {rep.worst:.3e} (tolerance {args.tolerance:g}, epsilon {args.epsilon:g})")
    if args.out:
        obj = {"seed": seed, "epsilon": args.epsilon, "tolerance": args.tolerance, "ok": rep.ok,
               "groups": groups, "parameters": rep.max_rel_error}
        _write_text(args.out, _dump(obj))
    if not rep.ok:
        raise NumericError(f"gradient check failed: worst relative error {rep.worst:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relgnn", formatter_class=_Formatter,
        description="Multi-label AU recognition with a knowledge-graph GGNN.",
        epilog="Exit codes: 0 ok, 1 I/O error, 2 validation error, 3 numeric failure. "
               "RELGNN_SEED overrides config-file seeds.")
    parser.add_argument("--version", action="version", version=f"relgnn {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("build-graph", formatter_class=_Formatter,
                       help="build the signed AU graph from a label CSV")
    p.add_argument("--labels", required=True, help="label CSV (subject,frame,AU<k>,...)")
    p.add_argument("--out", required=True, help="graph JSON output")
    p.add_argument("--au", type=int, nargs="*", help="AU columns to use (default: all)")
    p.add_argument("--intensity", action="store_true", help="cells are 0..5 intensities")
    p.add_argument("--c-level", type=int, default=2, help="intensity binarization level")
    p.add_argument("--p-pos", type=float, default=0.2, help="positive-edge threshold")
    p.add_argument("--p-neg", type=float, default=-0.03, help="negative-edge threshold")
    p.add_argument("--priors", default="bp4d", help="none, bp4d, or a priors JSON file")
    _common(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gen-synth", formatter_class=_Formatter,
                       help="generate a synthetic dataset with planted AU relations")
    p.add_argument("--config", required=True, help="synthetic config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="synthetic", help="dataset name in the manifest")
    p.add_argument("--k", type=int, default=3, help="number of subject folds")
    p.add_argument("--fold-seed", type=int, default=0, help="fold assignment seed")
    p.add_argument("--seed", type=int, help="generator seed (overrides config)")
    _common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("make-folds", formatter_class=_Formatter,
                       help="assign subjects to folds in a manifest")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--k", type=int, default=3, help="number of folds")
    p.add_argument("--seed", type=int, help="shuffle seed (default 0)")
    p.add_argument("--out", help="output manifest (default: rewrite in place)")
    _common(p)
    p.set_defaults(func=cmd_make_folds)

    p = sub.add_parser("train", formatter_class=_Formatter,
                       help="train SRERL or MS_RL on one or all folds")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="TrainConfig JSON; flags below override it")
    p.add_argument("--fold", help="test fold index or 'all' (default: config test_fold)")
    p.add_argument("--variant", choices=["SRERL", "MS_RL"], help="model variant")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--patience", type=int, help="early-stopping patience")
    p.add_argument("--batch-size", type=int, help="mini-batch size")
    p.add_argument("--dim", type=int, help="node feature / hidden size D")
    p.add_argument("--steps", type=int, help="GGNN steps T")
    p.add_argument("--branch-channels", type=int, help="conv channels per region branch")
    p.add_argument("--loss", choices=["balanced", "bce"], help="training loss")
    p.add_argument("--p-pos", type=float, help="positive-edge threshold")
    p.add_argument("--p-neg", type=float, help="negative-edge threshold")
    p.add_argument("--val-fraction", type=float, help="share of training subjects held out")
    p.add_argument("--priors", help="none, bp4d, or a priors JSON file")
    p.add_argument("--freeze", action="append", metavar="PREFIX",
                   help="parameter-name prefix to keep fixed (repeatable)")
    p.add_argument("--init", metavar="CHECKPOINT", help="start from a checkpoint's parameters")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=_Formatter,
                       help="evaluate a checkpoint or a multi-fold run")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--checkpoint", required=True, help="checkpoint dir or train output dir")
    p.add_argument("--folds", help="fold index or 'all' (default: checkpoint test fold)")
    p.add_argument("--out", help="report JSON (default: stdout)")
    p.add_argument("--roc", help="write ROC points as CSV")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", formatter_class=_Formatter,
                       help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, help="instance seed (default 1)")
    p.add_argument("--num-aus", type=int, default=4, help="number of AU nodes")
    p.add_argument("--dim", type=int, default=8, help="node size D")
    p.add_argument("--samples", type=int, default=2, help="batch size")
    p.add_argument("--branch-channels", type=int, default=2, help="conv channels per branch")
    p.add_argument("--epsilon", type=float, default=1e-4, help="central-difference step")
    p.add_argument("--tolerance", type=float, default=1e-5, help="max relative error")
    p.add_argument("--out", help="report JSON")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _threads(args.threads):
            return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
