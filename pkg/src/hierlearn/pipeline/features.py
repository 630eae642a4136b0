"""Lag selection from autocorrelation and design-matrix assembly.

Each hierarchy node gets up to ``top_lags`` lags per temporal level whose
autocorrelation exceeds ``lag_threshold``, with lag 1 as the fallback.
Exogenous series are kept when their absolute Pearson correlation with the
node exceeds ``feature_threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..hierarchy import SummationMatrix, Tree, aggregate


@dataclass(frozen=True)
class Thresholds:
    lag_threshold: float = 0.25
    top_lags: int = 3
    feature_threshold: float = 0.25
    max_lag_hours: int = 168


@dataclass
class FeatureSpec:
    """Selected lags per ``(node, block size)`` and exogenous labels per node.

    ``fit_end`` is the last timestamp read while selecting; it must precede
    every test window that consumes these features.
    """

    lags: dict
    exogenous: dict
    thresholds: Thresholds
    cycle: int
    block_sizes: tuple
    fit_end: object = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lags": {f"{node}@{k}": list(v) for (node, k), v in self.lags.items()},
            "exogenous": {str(k): list(v) for k, v in self.exogenous.items()},
            "thresholds": self.thresholds.__dict__,
            "cycle": self.cycle,
            "block_sizes": list(self.block_sizes),
            "fit_end": str(self.fit_end),
            "notes": list(self.notes),
        }


def acf(x, max_lag: int) -> np.ndarray | None:
    """Sample autocorrelation at lags ``0..max_lag``; None for a constant series."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    denom = float(d @ d)
    if denom <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))) ** 2 * len(x):
        return None
    max_lag = min(max_lag, len(x) - 1)
    return np.array([float(d[: len(x) - k] @ d[k:]) / denom for k in range(max_lag + 1)])


def select_lags(x, max_lag: int, threshold: float = 0.25, top: int = 3) -> tuple[int, ...]:
    """Up to ``top`` lags with autocorrelation above ``threshold``, best first."""
    r = acf(x, max_lag)
    if r is None or len(r) < 2:
        return (1,)
    lags = np.arange(1, len(r))
    vals = r[1:]
    ok = vals > threshold
    if not ok.any():
        return (1,)
    ranked = sorted(zip(-vals[ok], lags[ok]))[:top]
    return tuple(int(lag) for _, lag in ranked)


def block_sums(x, k: int) -> np.ndarray:
    """Consecutive sums of ``k`` hours; a trailing partial block is dropped."""
    x = np.asarray(x, dtype=float)
    usable = (len(x) // k) * k
    return x[:usable].reshape(-1, k).sum(axis=1)


def node_series(tree: Tree, frame_values: dict) -> dict:
    """Hourly series of every spatial node, aggregates summed from leaves."""
    out = {}
    for node in tree.nodes:
        leaves = tree.descendant_leaves(node)
        out[node] = np.sum([frame_values[leaf] for leaf in leaves], axis=0)
    return out


def build_features(
    series: dict,
    tree: Tree,
    cycle: int,
    block_sizes: Sequence[int],
    train_hours: int,
    thresholds: Thresholds = Thresholds(),
    exogenous: dict | None = None,
    fit_end=None,
) -> FeatureSpec:
    """Select lags and exogenous features from the first ``train_hours`` hours.

    ``series`` maps spatial leaf labels to hourly arrays; ``block_sizes`` are
    the temporal aggregation levels in hours (``(1,)`` for spatial-only).
    """
    nodes = node_series(tree, series)
    lags, exo = {}, {}
    for node, x in nodes.items():
        hist = x[:train_hours]
        for k in block_sizes:
            level = block_sums(hist, k)
            max_lag = max(1, math.ceil(thresholds.max_lag_hours / k))
            lags[(node, k)] = select_lags(level, max_lag, thresholds.lag_threshold, thresholds.top_lags)
        kept = []
        for label, z in (exogenous or {}).items():
            z = np.asarray(z, dtype=float)[:train_hours]
            if np.std(z) > 0 and np.std(hist) > 0:
                if abs(np.corrcoef(z, hist)[0, 1]) > thresholds.feature_threshold:
                    kept.append(label)
        exo[node] = tuple(kept)
    notes = ["exogenous features filtered by absolute Pearson correlation instead of MIC"]
    return FeatureSpec(lags, exo, thresholds, cycle, tuple(block_sizes), fit_end, notes)


@dataclass
class Design:
    """Rows are forecast origins (one per cycle); columns are features / nodes."""

    X: np.ndarray
    Y: np.ndarray
    cycles: np.ndarray
    owners: list
    first_valid: int


def design_matrix(
    series: dict,
    tree: Tree,
    S: SummationMatrix,
    spec: FeatureSpec,
    exogenous: dict | None = None,
) -> Design:
    """Lag features and composed targets for every complete cycle.

    Target row ``c`` stacks ``S`` applied to the leaf hours of cycle ``c``.
    Rows whose lags reach before the data start are flagged by
    ``first_valid``; they are still present so row numbers match cycles.
    """
    m = spec.cycle
    nodes = node_series(tree, series)
    n_hours = min(len(v) for v in series.values())
    n_cycles = n_hours // m
    leaf_pairs = S.leaves
    hours = np.arange(m)
    leaf_values = np.empty((n_cycles, len(leaf_pairs)))
    # second factor varies fastest, so its leaves appear in hour order
    t_pos = {t: i for i, t in enumerate(dict.fromkeys(p[1] for p in leaf_pairs))}
    if len(t_pos) != m:
        raise ValueError(f"temporal factor has {len(t_pos)} leaves, cycle is {m} hours")
    for j, (s_leaf, t_leaf) in enumerate(leaf_pairs):
        pos = t_pos[t_leaf]
        x = series[s_leaf]
        leaf_values[:, j] = x[: n_cycles * m].reshape(n_cycles, m)[:, pos]
    Y = aggregate(S, leaf_values)

    cols, owners = [], []
    first_valid = 0
    for node in tree.nodes:
        x = nodes[node]
        for k in spec.block_sizes:
            level = block_sums(x[: n_cycles * m], k)
            per_cycle = m // k
            for lag in spec.lags[(node, k)]:
                idx = np.arange(n_cycles) * per_cycle - lag
                first_valid = max(first_valid, math.ceil(lag / per_cycle))
                col = np.where(idx >= 0, level[np.clip(idx, 0, None)], np.nan)
                cols.append(col)
                owners.append(node)
        for label in spec.exogenous.get(node, ()):
            z = np.asarray(exogenous[label], dtype=float)[: n_cycles * m].reshape(n_cycles, m)
            for h in hours:
                cols.append(z[:, h])
                owners.append(node)
    X = np.column_stack(cols) if cols else np.empty((n_cycles, 0))
    return Design(X, Y, np.arange(n_cycles), owners, first_valid)
