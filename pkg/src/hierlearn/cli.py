"""Command-line entry point: ``hierlearn <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .covariance import dumps_estimate
from .hierarchy import (
    bottom_extractor,
    compose,
    dump_composed,
    dump_tree,
    loads_composed,
    loads_tree,
    prune,
    structural_vector,
    summation_matrix,
    temporal_tree,
)
from .metrics import EvaluationReport, coherency_ms3e, level_mse, ms3e, node_mse, relmse, structural_magnitude
from .pipeline.data import clean, ingest, resample
from .pipeline.experiment import (
    label_text,
    learner_params,
    level_text,
    load_config,
    prepare,
    run_experiment,
    run_forecaster,
    write_matrix_csv,
)
from .reconcile import GLSReconciler
from .treebuild import Dendrogram, cap_leaves, cut, default_threshold, ward_cluster


def _structure(path):
    text = Path(path).read_text()
    if text.startswith("#order:"):
        a, b, _ = loads_composed(text)
        return compose(summation_matrix(a), summation_matrix(b))
    return summation_matrix(loads_tree(text))


def _read_matrix(path, S=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0][1:], rows[1:]
    origins = [r[0] for r in body]
    values = np.array([[float(x) for x in r[1:]] for r in body]).reshape(len(body), len(header))
    if S is not None:
        pos = {label_text(lab): i for i, lab in enumerate(S.layout)}
        missing = [h for h in pos if h not in header]
        if missing or len(header) != len(pos):
            raise SystemExit(f"{path}: columns do not match the hierarchy (missing {missing[:5]})")
        order = [header.index(label_text(lab)) for lab in S.layout]
        values = values[:, order]
    return origins, values


def _overrides(args) -> dict:
    out = {}
    for attr, key in [
        ("seed", "experiment.seed"),
        ("alpha", "learner.alpha"),
        ("forecasters", "experiment.forecasters"),
        ("reconcilers", "experiment.reconcilers"),
        ("threshold", "hierarchy.threshold"),
        ("max_leaves", "hierarchy.max_leaves"),
        ("mode", "hierarchy.mode"),
        ("data", "data.path"),
        ("epochs", "learner.epochs"),
        ("workers", "experiment.workers"),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        out[key] = value
    return out


def cmd_synth(args) -> int:
    from .synthetic import make_loads, write_long, write_wide

    frame = make_loads(args.series, args.groups, args.days, args.noise, args.seed, temperature=args.temperature)
    (write_long if args.format == "long" else write_wide)(frame, args.out)
    print(f"wrote {frame.shape[1]} series x {frame.shape[0]} hours to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    raw = ingest(args.input, args.format)
    table = clean(resample(raw, "h", args.resample), args.max_gap, args.window, args.gap_rule)
    table.write_long(args.out)
    print(f"ingested {len(raw.labels)} series, kept {len(table.labels)}, dropped {len(table.dropped)}")
    for label, reason in sorted(table.dropped.items()):
        print(f"dropped\t{label}\t{reason}")
    return 0


def cmd_tree(args) -> int:
    if args.action == "build":
        table = ingest(args.input, "auto")
        labels = table.labels
        X = table.frame.to_numpy(dtype=float).T
        if args.train_hours:
            X = X[:, : args.train_hours]
        sd = X.std(axis=1, keepdims=True)
        X = (X - X.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
        dend = ward_cluster(X, labels)
        if args.dendrogram:
            Path(args.dendrogram).write_text(dend.dumps())
        thr = default_threshold(dend) if args.threshold is None else args.threshold
        tree = cut(dend, thr)
        if args.max_leaves:
            tree = cap_leaves(tree, args.max_leaves, dend)
        text = dump_tree(tree)
    elif args.action == "cut":
        dend = Dendrogram.loads(Path(args.input).read_text())
        thr = default_threshold(dend) if args.threshold is None else args.threshold
        tree = cut(dend, thr)
        if args.max_leaves:
            tree = cap_leaves(tree, args.max_leaves, dend)
        text = dump_tree(tree)
    elif args.action == "temporal":
        ks = tuple(int(k) for k in args.ks.split(","))
        text = dump_tree(temporal_tree(args.cycle, ks, unit="h"))
    elif args.action == "compose":
        a = loads_tree(Path(args.input).read_text())
        b = loads_tree(Path(args.other).read_text())
        S = compose(summation_matrix(a), summation_matrix(b))
        print(f"composed shape {S.shape[0]} x {S.shape[1]}", file=sys.stderr)
        text = dump_composed(a, b, args.order)
    elif args.action == "prune":
        S = _structure(args.input)
        drop = [tuple(x.split("|")) if "|" in x else x for x in (args.drop or [])]
        if args.redundant:
            drop += list(S.redundant_rows())
        S = prune(S, drop)
        text = "".join(label_text(lab) + "\n" for lab in S.layout)
        print(f"pruned shape {S.shape[0]} x {S.shape[1]}", file=sys.stderr)
    else:  # pragma: no cover - argparse restricts choices
        raise SystemExit(f"unknown tree action {args.action}")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_features(args) -> int:
    prep = prepare(load_config(args.config, _overrides(args)))
    text = json.dumps(prep.spec.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    prep = prepare(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tree.txt").write_text(dump_composed(prep.tree_spatial, prep.tree_temporal, "SoT"))
    (out / "params.json").write_text(json.dumps(learner_params(cfg), indent=2, sort_keys=True))
    results = run_forecaster(prep, args.forecaster)
    labels = prep.S.layout
    origins = prep.dataset.origins
    for res in results:
        o_te = [origins[i] for i in res.test_rows]
        o_tr = [origins[i] for i in res.train_rows]
        write_matrix_csv(out / f"forecasts_batch{res.index}.csv", o_te, labels, res.forecasts)
        write_matrix_csv(out / f"truth_batch{res.index}.csv", o_te, labels, prep.dataset.Y[res.test_rows])
        write_matrix_csv(out / f"residuals_batch{res.index}.csv", o_tr, labels, res.train_residuals)
    print(f"trained {len(results)} batches of {args.forecaster}; outputs in {out}")
    return 0


def cmd_reconcile(args) -> int:
    S = _structure(args.tree)
    origins, yhat = _read_matrix(args.forecasts, S)
    resid = _read_matrix(args.residuals, S)[1] if args.residuals else None
    rec = GLSReconciler(S, method=args.method).fit(resid)
    write_matrix_csv(Path(args.out), origins, S.layout, rec.transform(yhat))
    if args.sigma_out:
        Path(args.sigma_out).write_text(dumps_estimate(rec.covariance_))
    return 0


def cmd_evaluate(args) -> int:
    S = _structure(args.tree)
    G = bottom_extractor(S)
    kappa = structural_vector(S)
    levels = [level_text(lv) for lv in S.levels]
    _, truth = _read_matrix(args.truth, S)
    report = EvaluationReport(units=args.units)
    for path in args.forecasts:
        stem = Path(path).stem
        f, _, r = stem.partition("__")
        _, fc = _read_matrix(path, S)
        coh = coherency_ms3e(fc, S, G, kappa)
        report.add(
            f,
            r or "None",
            hierarchical_ms3e=float(ms3e(truth - fc, kappa).mean()),
            coherency_ms3e=coh,
            coherency_relative=coh / (1.0 + structural_magnitude(fc, kappa)),
            level_mse=level_mse(truth, fc, levels),
            node_mse={label_text(lab): float(v) for lab, v in zip(S.layout, node_mse(truth, fc))},
        )
    base = report.cells.get(("base", "None"))
    if base:
        for cell in report.cells.values():
            cell["relmse"] = {k: relmse(v, base["level_mse"][k]) for k, v in cell["level_mse"].items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report.table())
    (out / "report.json").write_text(report.to_json())
    sys.stdout.write(report.table())
    return 0


def cmd_run(args) -> int:
    result = run_experiment(args.config, out_dir=args.out, overrides=_overrides(args))
    sys.stdout.write(result.report.table())
    failed = result.report.failed
    for f, r in failed:
        print(f"cell failed: {f}/{r}: {result.report.cells[(f, r)]['error']}", file=sys.stderr)
    return 1 if failed else 0


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--data", help="override [data] path")
    p.add_argument("--mode", choices=("spatial", "temporal", "spatio-temporal"))
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--forecasters", help="comma list: base,multi-task,hierarchical[:schedule]")
    p.add_argument("--reconcilers", help="comma list: None,id,str,svar,hvar,cov,kcov")
    p.add_argument("--threshold", help="dendrogram cut distance or 'auto'")
    p.add_argument("--max-leaves", dest="max_leaves", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="any other config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierlearn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic meter data")
    p.add_argument("--out", required=True)
    p.add_argument("--series", type=int, default=8)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--days", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("long", "wide"), default="long")
    p.add_argument("--temperature", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="ingest, resample and clean a CSV into long format")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("auto", "long", "wide"), default="auto")
    p.add_argument("--resample", choices=("mean", "sum"), default="mean")
    p.add_argument("--max-gap", dest="max_gap", type=int, default=2)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--gap-rule", dest="gap_rule", choices=("contiguous", "total"), default="contiguous")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("tree", help="build, cut, compose or prune hierarchies")
    p.add_argument("action", choices=("build", "cut", "temporal", "compose", "prune"))
    p.add_argument("input", nargs="?", help="data CSV (build), dendrogram (cut), tree file (compose/prune)")
    p.add_argument("other", nargs="?", help="second tree (compose)")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-leaves", dest="max_leaves", type=int)
    p.add_argument("--train-hours", dest="train_hours", type=int)
    p.add_argument("--dendrogram", help="also write the merge list here (build)")
    p.add_argument("--cycle", type=int, default=24)
    p.add_argument("--ks", default="24,6,3,1")
    p.add_argument("--order", choices=("SoT", "ToS"), default="SoT")
    p.add_argument("--drop", nargs="*", help="aggregate labels to remove; composed labels as a|b")
    p.add_argument("--redundant", action="store_true", help="drop single-child aggregates")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("features", help="select lags and exogenous features")
    _experiment_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one forecaster over all rolling batches")
    _experiment_flags(p)
    p.add_argument("--forecaster", default="hierarchical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconcile", help="GLS-reconcile a forecast file")
    p.add_argument("--tree", required=True)
    p.add_argument("--forecasts", required=True)
    p.add_argument("--residuals")
    p.add_argument("--method", default="id", choices=("id", "str", "svar", "hvar", "cov", "kcov", "bu"))
    p.add_argument("--out", required=True)
    p.add_argument("--sigma-out", dest="sigma_out")
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser("evaluate", help="score forecast files against the truth")
    p.add_argument("--tree", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--units", default="kWh")
    p.add_argument("--out", required=True)
    p.add_argument("forecasts", nargs="+", help="files named <forecaster>__<reconciler>.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run the full forecaster x reconciler grid")
    _experiment_flags(p)
    p.add_argument("--out", help="output directory (default from config)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
