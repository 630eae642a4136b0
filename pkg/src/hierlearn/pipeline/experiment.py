"""Batch experiments over a forecasting x reconciliation method grid."""

from __future__ import annotations

import configparser
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..covariance import dumps_estimate
from ..hierarchy import (
    SummationMatrix,
    Tree,
    bottom_extractor,
    build_tree,
    compose,
    dump_composed,
    prune,
    structural_vector,
    summation_matrix,
    temporal_summation,
    temporal_tree,
)
from ..learner import BatchResult, WindowedDataset, save_checkpoint, train
from ..metrics import EvaluationReport, coherency_ms3e, level_mse, ms3e, node_mse, relmse, structural_magnitude
from ..reconcile import GLSReconciler
from ..treebuild import Dendrogram, WardTreeBuilder
from .data import clean, ingest, resample
from .features import FeatureSpec, Thresholds, build_features, design_matrix
from .windows import plan_windows

log = logging.getLogger(__name__)

HIERARCHY_MODES = ("spatial", "temporal", "spatio-temporal")
RECONCILERS = ("None", "id", "str", "svar", "hvar", "cov", "kcov")

DEFAULTS = {
    "data": {"path": "", "format": "auto", "resample": "mean", "exogenous": ""},
    "clean": {"max_gap_hours": "2", "window_hours": "8", "gap_rule": "contiguous"},
    "hierarchy": {
        "mode": "spatial",
        "threshold": "auto",
        "max_leaves": "50",
        "cycle": "24",
        "block_sizes": "24,6,3,1",
        "temporal_series": "",
        "prune": "",
    },
    "features": {"lag_threshold": "0.25", "top_lags": "3", "feature_threshold": "0.25", "max_lag_hours": "168"},
    "windows": {"n_batches": "3", "test_size": "24"},
    "learner": {
        "alpha": "0.75",
        "layers": "3",
        "activation": "sigmoid",
        "dropout": "0.2",
        "learning_rate": "0.001",
        "momentum": "0.9",
        "clip_norm": "5",
        "epochs": "100",
        "batch_size": "32",
        "schedule": "hvar",
        "clamp_quantile": "",
    },
    "experiment": {
        "forecasters": "base,multi-task,hierarchical",
        "reconcilers": ",".join(RECONCILERS),
        "seed": "0",
        "residual_window": "0",
        "workers": "1",
        "save_models": "false",
    },
    "output": {"dir": "out"},
}


class LeakageError(RuntimeError):
    pass


def load_config(source=None, overrides: dict | None = None) -> configparser.ConfigParser:
    """Read an INI config over :data:`DEFAULTS`.

    ``source`` is a path, INI text, or None. ``overrides`` maps
    ``"section.key"`` to a value.
    """
    cfg = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cfg.read_dict(DEFAULTS)
    if source is not None:
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
            with open(source) as fh:
                cfg.read_file(fh)
        else:
            cfg.read_string(str(source))
    for key, value in (overrides or {}).items():
        section, name = key.split(".", 1)
        cfg.set(section, name, str(value))
    return cfg


def config_echo(cfg: configparser.ConfigParser) -> dict:
    return {s: dict(cfg[s]) for s in cfg.sections()}


def _csv(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def label_text(label) -> str:
    if isinstance(label, tuple):
        return "|".join(label_text(x) for x in label)
    return str(label)


def level_text(level) -> str:
    if isinstance(level, tuple):
        return ".".join(level_text(x) for x in level)
    return str(level)


@dataclass
class Provenance:
    """Read-end vs consumer-start pairs backing the anti-leakage assertion."""

    entries: list = field(default_factory=list)

    def record(self, what: str, read_end, consumer_start) -> None:
        self.entries.append({"what": what, "read_end": str(read_end), "consumer_start": str(consumer_start)})
        if not read_end < consumer_start:
            raise LeakageError(f"{what}: read data through {read_end}, consumed from {consumer_start}")


@dataclass
class Prepared:
    cfg: configparser.ConfigParser
    dataset: WindowedDataset
    S: SummationMatrix
    tree_spatial: Tree
    tree_temporal: Tree
    spec: FeatureSpec
    dendrogram: Dendrogram | None
    hour_index: object
    cycle: int
    ingested: list
    dropped: dict
    provenance: Provenance

    def read_end(self, row: int):
        """Last hourly timestamp of cycle ``row``."""
        return self.hour_index[(row + 1) * self.cycle - 1]

    def start_of(self, row: int):
        return self.hour_index[row * self.cycle]


def prepare(cfg: configparser.ConfigParser) -> Prepared:
    """Ingest, clean, build the hierarchy and features, and plan windows."""
    mode = cfg.get("hierarchy", "mode")
    if mode not in HIERARCHY_MODES:
        raise ValueError(f"hierarchy.mode must be one of {HIERARCHY_MODES}, got {mode!r}")
    raw = ingest(cfg.get("data", "path"), cfg.get("data", "format"))
    ingested = raw.labels
    table = resample(raw, "h", cfg.get("data", "resample"))
    table = clean(
        table,
        cfg.getint("clean", "max_gap_hours"),
        cfg.getint("clean", "window_hours"),
        cfg.get("clean", "gap_rule"),
    )
    if len(table.labels) + len(table.dropped) != len(ingested):
        raise RuntimeError("retained and dropped series do not add up to the ingested count")
    exo_labels = [x for x in _csv(cfg.get("data", "exogenous")) if x in table.labels]
    targets = [x for x in table.labels if x not in exo_labels]
    if not targets:
        raise ValueError("no target series survived cleaning")

    if mode == "spatial":
        cycle, ks = 1, (1,)
    else:
        cycle = cfg.getint("hierarchy", "cycle")
        ks = tuple(int(k) for k in _csv(cfg.get("hierarchy", "block_sizes")))
    index = table.index
    start = 0
    if cycle > 1 and 24 % cycle == 0:
        hours = np.asarray(index.hour)
        aligned = np.flatnonzero(hours % cycle == 0)
        start = int(aligned[0]) if aligned.size else 0
    index = index[start:]
    values = {lab: table.frame[lab].to_numpy(dtype=float)[start:] for lab in table.labels}
    n_cycles = len(index) // cycle

    plan = plan_windows(n_cycles, cfg.getint("windows", "n_batches"), cfg.getint("windows", "test_size"))
    train_hours = plan.first_test_start * cycle
    fit_end = index[train_hours - 1]
    first_test = index[train_hours]
    prov = Provenance()

    dendrogram = None
    if mode == "temporal":
        label = cfg.get("hierarchy", "temporal_series") or targets[0]
        if label not in targets:
            raise ValueError(f"temporal_series {label!r} is not a retained target")
        tree_S = build_tree([], root=label)
    else:
        hist = np.array([values[t][:train_hours] for t in targets])
        sd = hist.std(axis=1, keepdims=True)
        hist = (hist - hist.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
        thr = cfg.get("hierarchy", "threshold")
        cap = cfg.get("hierarchy", "max_leaves")
        builder = WardTreeBuilder(
            threshold=None if thr in ("", "auto") else float(thr),
            max_leaves=int(cap) if cap else None,
        ).fit(hist, labels=targets)
        tree_S, dendrogram = builder.tree_, builder.dendrogram_
        prov.record("spatial tree clustering", fit_end, first_test)

    if mode == "spatial":
        S_T = temporal_summation(1, (1,), unit="h")
        tree_T = temporal_tree(1, (1,), unit="h")
    else:
        S_T = temporal_summation(cycle, ks, unit="h")
        tree_T = temporal_tree(cycle, ks, unit="h")
    S = compose(summation_matrix(tree_S), S_T)
    drop = [tuple(x.split("|")) for x in _csv(cfg.get("hierarchy", "prune"))]
    if drop:
        S = prune(S, drop)

    thresholds = Thresholds(
        cfg.getfloat("features", "lag_threshold"),
        cfg.getint("features", "top_lags"),
        cfg.getfloat("features", "feature_threshold"),
        cfg.getint("features", "max_lag_hours"),
    )
    leaf_series = {leaf: values[leaf] for leaf in tree_S.leaf_order}
    exo = {lab: values[lab] for lab in exo_labels}
    spec = build_features(leaf_series, tree_S, cycle, ks, train_hours, thresholds, exo, fit_end)
    prov.record("lag and feature selection", fit_end, first_test)
    design = design_matrix(leaf_series, tree_S, S, spec, exo)
    plan = plan.restrict_train(design.first_valid)

    leafset = set(tree_S.leaf_order)
    owners = np.array([label_text(o) for o in design.owners], dtype=object)
    leaf_columns = np.flatnonzero([o in leafset for o in design.owners])
    node_columns = [np.flatnonzero(owners == label_text(s)) for s, _ in S.layout]
    origins = [index[c * cycle] for c in design.cycles]
    dataset = WindowedDataset(design.X, design.Y, origins, plan, S, leaf_columns, node_columns)
    return Prepared(
        cfg, dataset, S, tree_S, tree_T, spec, dendrogram, index, cycle, ingested, dict(table.dropped), prov
    )


def learner_params(cfg: configparser.ConfigParser) -> dict:
    sec = cfg["learner"]
    clamp = sec.get("clamp_quantile", "")
    return {
        "alpha": float(sec["alpha"]),
        "layers": int(sec["layers"]),
        "activation": sec["activation"],
        "dropout": float(sec["dropout"]),
        "learning_rate": float(sec["learning_rate"]),
        "momentum": float(sec["momentum"]),
        "clip_norm": float(sec["clip_norm"]),
        "epochs": int(sec["epochs"]),
        "batch_size": int(sec["batch_size"]),
        "seed": cfg.getint("experiment", "seed"),
        "clamp_quantile": float(clamp) if clamp else None,
    }


def parse_forecaster(name: str, default_schedule: str) -> tuple[str, str]:
    """``"hierarchical:svar"`` -> (``"hierarchical"``, ``"svar"``)."""
    mode, _, schedule = name.partition(":")
    return mode, schedule or default_schedule


def run_forecaster(prep: Prepared, name: str, prov: Provenance | None = None) -> list[BatchResult]:
    # forecasters may run in threads; callers pass a private log to keep entry order stable
    prov = prep.provenance if prov is None else prov
    mode, schedule = parse_forecaster(name, prep.cfg.get("learner", "schedule"))
    results = train(mode, prep.dataset, learner_params(prep.cfg), schedule)
    for res in results:
        tr, te = res.train_rows, res.test_rows
        prov.record(f"{name} batch {res.index} scaler", prep.read_end(tr[-1]), prep.start_of(te[0]))
        if mode == "hierarchical" and res.index > 0:
            prev = results[res.index - 1].test_rows
            prov.record(
                f"{name} batch {res.index} coherency sigma", prep.read_end(prev[-1]), prep.start_of(te[0])
            )
    return results


@dataclass
class CellOutput:
    forecasts: np.ndarray
    sigmas: list


def reconcile_cell(prep: Prepared, name: str, results: list[BatchResult], method: str) -> CellOutput:
    window = prep.cfg.getint("experiment", "residual_window")
    if method == "None":
        return CellOutput(np.vstack([r.forecasts for r in results]), [])
    out, sigmas = [], []
    for res in results:
        resid = res.train_residuals[-window:] if window > 0 else res.train_residuals
        rec = GLSReconciler(prep.S, method=method).fit(resid)
        prep.provenance.record(
            f"{name}/{method} batch {res.index} reconciliation sigma",
            prep.read_end(res.train_rows[-1]),
            prep.start_of(res.test_rows[0]),
        )
        out.append(rec.transform(res.forecasts))
        sigmas.append(rec.covariance_)
    return CellOutput(np.vstack(out), sigmas)


@dataclass
class ExperimentResult:
    report: EvaluationReport
    prepared: Prepared
    forecasts: dict
    truth: np.ndarray
    origins: list


def run_experiment(config, out_dir=None, overrides: dict | None = None) -> ExperimentResult:
    """Train, reconcile and score every (forecaster, reconciler) cell.

    A failing cell is recorded in the report and the other cells proceed.
    """
    cfg = config if isinstance(config, configparser.ConfigParser) else load_config(config, overrides)
    if isinstance(config, configparser.ConfigParser) and overrides:
        for key, value in overrides.items():
            section, name = key.split(".", 1)
            cfg.set(section, name, str(value))
    prep = prepare(cfg)
    S = prep.S
    G = bottom_extractor(S)
    kappa = structural_vector(S)
    levels = [level_text(lv) for lv in S.levels]
    forecasters = _csv(cfg.get("experiment", "forecasters"))
    reconcilers = _csv(cfg.get("experiment", "reconcilers"))
    bad = [r for r in reconcilers if r not in RECONCILERS + ("bu",)]
    if bad:
        raise ValueError(f"unknown reconcilers {bad}")

    test_rows = np.concatenate([np.asarray(te) for _, te in prep.dataset.plan.batches])
    truth = prep.dataset.Y[test_rows]
    origins = [prep.dataset.origins[i] for i in test_rows]

    trained: dict = {}
    errors: dict = {}

    logs = {name: Provenance() for name in forecasters}

    def job(name):
        try:
            return name, run_forecaster(prep, name, logs[name]), None
        except Exception as exc:  # recorded per cell
            log.exception("forecaster %s failed", name)
            return name, None, f"{type(exc).__name__}: {exc}"

    workers = max(1, cfg.getint("experiment", "workers"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, forecasters))
    else:
        outcomes = [job(f) for f in forecasters]
    for name in logs:
        prep.provenance.entries.extend(logs[name].entries)
    for name, res, err in outcomes:
        if err:
            errors[name] = err
        else:
            trained[name] = res

    report = EvaluationReport(units="kWh")
    report.header = {
        "version": __version__,
        "config": config_echo(cfg),
        "n": S.n,
        "m": S.m,
        "ingested": len(prep.ingested),
        "dropped": dict(sorted(prep.dropped.items())),
        "feature_notes": prep.spec.notes,
        "test_rows": int(len(test_rows)),
    }
    cells: dict = {}
    base_levels = None
    for f in forecasters:
        for r in reconcilers:
            if f in errors:
                report.add(f, r, error=errors[f])
                continue
            try:
                cell = reconcile_cell(prep, f, trained[f], r)
            except Exception as exc:
                log.exception("cell %s/%s failed", f, r)
                report.add(f, r, error=f"{type(exc).__name__}: {exc}")
                continue
            cells[(f, r)] = cell
            fc = cell.forecasts
            err = truth - fc
            lv = level_mse(truth, fc, levels)
            if parse_forecaster(f, "")[0] == "base" and r == "None":
                base_levels = lv
            coh = coherency_ms3e(fc, S, G, kappa)
            report.add(
                f,
                r,
                hierarchical_ms3e=float(ms3e(err, kappa).mean()),
                coherency_ms3e=coh,
                coherency_relative=coh / (1.0 + structural_magnitude(fc, kappa)),
                level_mse=lv,
                node_mse={label_text(lab): float(v) for lab, v in zip(S.layout, node_mse(truth, fc))},
            )
    if base_levels is not None:
        for key, cell in report.cells.items():
            if cell["error"] is None:
                cell["relmse"] = {
                    k: relmse(v, base_levels[k]) if base_levels[k] > 0 else None for k, v in cell["level_mse"].items()
                }
    report.header["provenance"] = prep.provenance.entries

    result = ExperimentResult(report, prep, {k: v.forecasts for k, v in cells.items()}, truth, origins)
    out = out_dir if out_dir is not None else cfg.get("output", "dir")
    if out:
        write_artifacts(Path(out), result, cells, trained)
    return result


def write_matrix_csv(path: Path, origins, labels, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("origin," + ",".join(label_text(x) for x in labels) + "\n")
        for o, row in zip(origins, values):
            fh.write(str(o) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def write_artifacts(out: Path, result: ExperimentResult, cells: dict, trained: dict) -> None:
    prep = result.prepared
    out.mkdir(parents=True, exist_ok=True)
    (out / "forecasts").mkdir(exist_ok=True)
    (out / "sigma").mkdir(exist_ok=True)
    (out / "report.tsv").write_text(result.report.table())
    (out / "report.json").write_text(result.report.to_json())
    (out / "tree.txt").write_text(dump_composed(prep.tree_spatial, prep.tree_temporal, "SoT"))
    if prep.dendrogram is not None:
        (out / "dendrogram.txt").write_text(prep.dendrogram.dumps())
    (out / "features.json").write_text(json.dumps(prep.spec.to_dict(), indent=2, sort_keys=True))
    write_matrix_csv(out / "truth.csv", result.origins, prep.S.layout, result.truth)
    for (f, r), cell in cells.items():
        stem = f"{f.replace(':', '-')}__{r}"
        write_matrix_csv(out / "forecasts" / f"{stem}.csv", result.origins, prep.S.layout, cell.forecasts)
        for i, est in enumerate(cell.sigmas):
            (out / "sigma" / f"{stem}__batch{i}.txt").write_text(dumps_estimate(est))
    if prep.cfg.getboolean("experiment", "save_models"):
        (out / "models").mkdir(exist_ok=True)
        for f, results in trained.items():
            for res in results:
                save_checkpoint(res.regressor, out / "models" / f"{f.replace(':', '-')}__batch{res.index}.json")
