"""Accuracy and coherency scores with hierarchy-aware scaling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .hierarchy import SummationMatrix, coherency_residual, structural_vector


class MetricError(ValueError):
    pass


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise MetricError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise MetricError("empty input")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def node_mse(Y, Yhat) -> np.ndarray:
    """Per-node MSE over the horizon for ``(h, n)`` arrays."""
    Y, Yhat = _pair(np.atleast_2d(Y), np.atleast_2d(Yhat))
    return np.mean((Y - Yhat) ** 2, axis=0)


def by_level(values: np.ndarray, levels: Sequence) -> dict:
    """Mean of per-node values within each aggregation level."""
    values = np.asarray(values, dtype=float)
    out = {}
    for key in dict.fromkeys(levels):
        sel = np.array([lvl == key for lvl in levels])
        out[key] = float(values[sel].mean())
    return out


def level_mse(Y, Yhat, levels: Sequence) -> dict:
    return by_level(node_mse(Y, Yhat), levels)


def relmse(mse_k: float, mse_base_k: float) -> float:
    if not mse_base_k > 0:
        raise MetricError("base MSE must be positive")
    return mse_k / mse_base_k - 1.0


def scaled_errors(e, kappa) -> np.ndarray:
    """Hadamard division of errors by the structural vector."""
    e = np.asarray(e)
    kappa = np.asarray(kappa)
    if np.any(kappa <= 0):
        raise MetricError("kappa entries must be strictly positive")
    if e.shape[-1] != kappa.shape[-1]:
        raise MetricError(f"length mismatch: {e.shape[-1]} vs {kappa.shape[-1]}")
    return e / kappa


def ms3e(errors, kappa) -> np.ndarray:
    """Per-node mean structurally-scaled square error over the horizon."""
    E = np.atleast_2d(np.asarray(errors, dtype=float))
    if E.shape[0] == 0:
        raise MetricError("empty horizon")
    return np.mean(scaled_errors(E, kappa) ** 2, axis=0)


def coherency_ms3e(values, S: SummationMatrix, G, kappa=None) -> float:
    """MS3E of the coherency residuals of forecast rows, averaged over nodes."""
    kappa = structural_vector(S) if kappa is None else kappa
    res = coherency_residual(S, G, np.atleast_2d(values))
    return float(ms3e(res, kappa).mean())


def structural_magnitude(values, kappa) -> float:
    """Mean squared scaled value; normalizes coherency MS3E to a relative figure."""
    return float(np.mean(scaled_errors(np.atleast_2d(values), kappa) ** 2))


@dataclass
class EvaluationReport:
    """Scores keyed by ``(forecasting method, reconciliation method)``.

    Reconciliation ``"None"`` marks unreconciled forecasts.
    """

    units: str = "kWh"
    cells: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def add(
        self,
        forecaster: str,
        reconciler: str,
        *,
        hierarchical_ms3e: float | None = None,
        coherency_ms3e: float | None = None,
        coherency_relative: float | None = None,
        level_mse: Mapping | None = None,
        relmse: Mapping | None = None,
        node_mse: Mapping | None = None,
        error: str | None = None,
    ) -> None:
        self.cells[(forecaster, reconciler)] = {
            "hierarchical_ms3e": hierarchical_ms3e,
            "coherency_ms3e": coherency_ms3e,
            "coherency_relative": coherency_relative,
            "level_mse": dict(level_mse or {}),
            "relmse": dict(relmse or {}),
            "node_mse": dict(node_mse or {}),
            "error": error,
        }

    @property
    def failed(self) -> list[tuple[str, str]]:
        return [k for k, v in self.cells.items() if v["error"]]

    def table(self) -> str:
        """One tab-separated row per method pair and metric."""
        u2 = f"{self.units}^2"
        lines = ["forecaster\treconciler\tmetric\tlevel\tvalue\tunits"]
        for (f, r), cell in self.cells.items():
            if cell["error"]:
                lines.append(f"{f}\t{r}\terror\t-\t{cell['error']}\t-")
                continue
            lines.append(f"{f}\t{r}\thierarchical_ms3e\tall\t{cell['hierarchical_ms3e']!r}\t{u2}")
            lines.append(f"{f}\t{r}\tcoherency_ms3e\tall\t{cell['coherency_ms3e']!r}\t{u2}")
            for lvl, v in cell["level_mse"].items():
                lines.append(f"{f}\t{r}\tmse\t{lvl}\t{v!r}\t{u2}")
            for lvl, v in cell["relmse"].items():
                lines.append(f"{f}\t{r}\trelmse\t{lvl}\t{v!r}\t1")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        doc: dict = {"header": self.header, "units": {"ms3e": f"{self.units}^2", "mse": f"{self.units}^2", "relmse": "1"}, "cells": {}}
        for (f, r), cell in self.cells.items():
            doc["cells"].setdefault(f, {})[r] = {
                k: ({str(a): b for a, b in v.items()} if isinstance(v, dict) else v) for k, v in cell.items()
            }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
