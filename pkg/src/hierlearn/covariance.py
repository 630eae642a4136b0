"""Weight matrices for GLS reconciliation.

Six estimators are supported:

``id``    identity
``str``   structural scaling, ``diag(S 1)``
``svar``  one pooled residual variance per aggregation level
``hvar``  one residual variance per node
``cov``   shrunk full covariance
``kcov``  shrunk covariance restricted to blocks of equal aggregation level

Each estimate carries its topological mask, the 0/1 pattern of entries the
method is allowed to model. Masks of two dimensions compose through the
Kronecker product and are then filled from residuals with :func:`populate`.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .hierarchy import COMPOSE_ENTRY_CAP, HierarchyError, SummationMatrix, YLayout, structural_vector

METHODS = ("id", "str", "svar", "hvar", "cov", "kcov")
DIAGONAL_METHODS = ("id", "str", "svar", "hvar")

VARIANCE_FLOOR = 1e-12
LOADING_START = 1e-9
LOADING_GROWTH = 10.0
LOADING_RETRIES = 6


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ResidualStore:
    """Base-forecast errors, one column per node label, one row per sample."""

    labels: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.size == 0:
            values = values.reshape(0, len(self.labels))
        if values.shape[1] != len(self.labels):
            raise CovarianceError(
                f"{values.shape[1]} residual columns for {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(values)):
            raise CovarianceError("residuals must be finite")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "values", values)

    @classmethod
    def from_mapping(cls, residuals: Mapping) -> "ResidualStore":
        labels = tuple(residuals)
        lengths = {len(residuals[k]) for k in labels}
        if len(lengths) > 1:
            raise CovarianceError(f"nodes disagree on sample count: {sorted(lengths)}")
        values = np.column_stack([np.asarray(residuals[k], dtype=float) for k in labels]) if labels else np.empty((0, 0))
        return cls(labels, values)

    @classmethod
    def empty(cls, labels: Sequence = ()) -> "ResidualStore":
        return cls(tuple(labels), np.empty((0, len(labels))))

    @property
    def samples(self) -> int:
        return self.values.shape[0]

    def aligned(self, layout: YLayout | Sequence) -> np.ndarray:
        """Residual matrix with columns in ``layout`` order."""
        pos = {lab: i for i, lab in enumerate(self.labels)}
        try:
            cols = [pos[lab] for lab in layout]
        except KeyError as exc:
            raise CovarianceError(f"no residuals for node {exc.args[0]!r}") from None
        return self.values[:, cols]


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    method: str
    sigma: np.ndarray
    mask: np.ndarray
    shrinkage: float | None = None

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return bool(np.array_equal(self.mask, np.eye(self.n, dtype=self.mask.dtype)))

    def scaled(self, c: float) -> "CovarianceEstimate":
        return CovarianceEstimate(self.method, self.sigma * c, self.mask, self.shrinkage)


# -- helpers -------------------------------------------------------------------


def _node_variances(E: np.ndarray) -> np.ndarray:
    var = E.var(axis=0, ddof=1)
    top = var.max() if var.size and var.max() > 0 else 1.0
    return np.maximum(var, VARIANCE_FLOOR * top)


def _require_samples(E: np.ndarray, need: int, method: str) -> None:
    if E.shape[0] < need:
        raise CovarianceError(
            f"insufficient samples for {method!r}: {E.shape[0]} < {need}"
        )


def level_mask(levels: Sequence) -> np.ndarray:
    """1 where two rows share an aggregation level."""
    codes = {lvl: i for i, lvl in enumerate(dict.fromkeys(levels))}
    c = np.array([codes[lvl] for lvl in levels])
    return (c[:, None] == c[None, :]).astype(np.int64)


def topological_mask(method: str, levels: Sequence) -> np.ndarray:
    n = len(levels)
    if method in DIAGONAL_METHODS:
        return np.eye(n, dtype=np.int64)
    if method == "cov":
        return np.ones((n, n), dtype=np.int64)
    if method == "kcov":
        return level_mask(levels)
    raise CovarianceError(f"unknown method {method!r}; expected one of {METHODS}")


def ensure_positive_definite(sigma: np.ndarray) -> np.ndarray:
    """Return ``sigma``, diagonally loaded if its Cholesky factorization fails."""
    sigma = 0.5 * (sigma + sigma.T)
    try:
        np.linalg.cholesky(sigma)
        return sigma
    except np.linalg.LinAlgError:
        pass
    n = sigma.shape[0]
    delta = LOADING_START * max(np.trace(sigma) / n, np.finfo(float).tiny)
    for _ in range(LOADING_RETRIES + 1):
        loaded = sigma + delta * np.eye(n)
        try:
            np.linalg.cholesky(loaded)
            return loaded
        except np.linalg.LinAlgError:
            delta *= LOADING_GROWTH
    raise CovarianceError("covariance matrix is not positive definite after diagonal loading")


def shrinkage_lambda(residuals: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Optimal correlation shrinkage intensity (Schafer-Strimmer).

    ``lambda = sum Var(r_ij) / sum r_ij^2`` over off-diagonal pairs inside
    ``mask``; a zero denominator yields 1.
    """
    E = np.asarray(residuals, dtype=float)
    h, n = E.shape
    if h < 3:
        raise CovarianceError(f"shrinkage needs at least 3 samples, got {h}")
    centered = E - E.mean(axis=0)
    sd = centered.std(axis=0, ddof=1)
    live = sd > 0
    Z = np.zeros_like(centered)
    Z[:, live] = centered[:, live] / sd[live]
    w_sum = Z.T @ Z
    w_sq_sum = (Z**2).T @ (Z**2)
    w_bar = w_sum / h
    r = w_sum / (h - 1)
    var_r = h / (h - 1) ** 3 * np.maximum(w_sq_sum - h * w_bar**2, 0.0)
    off = ~np.eye(n, dtype=bool)
    if mask is not None:
        off &= np.asarray(mask, dtype=bool)
    den = float(np.sum(r[off] ** 2))
    if den == 0.0:
        return 1.0
    return float(min(1.0, max(0.0, np.sum(var_r[off]) / den)))


def _shrunk(E: np.ndarray, mask: np.ndarray, shrinkage: float | None) -> tuple[np.ndarray, float]:
    var = _node_variances(E)
    lam = shrinkage_lambda(E, mask) if shrinkage is None else float(shrinkage)
    if not 0.0 <= lam <= 1.0:
        raise CovarianceError(f"shrinkage must lie in [0, 1], got {lam}")
    C = np.cov(E, rowvar=False, ddof=1).reshape(E.shape[1], E.shape[1])
    # off-diagonal of D^1/2 R D^1/2 is the sample covariance itself
    sigma = (1.0 - lam) * C * mask
    np.fill_diagonal(sigma, var)
    return sigma, lam


# -- public API ---------------------------------------------------------------


def estimate(
    method: str,
    S: SummationMatrix,
    residuals: ResidualStore | None = None,
    level_of: Mapping | None = None,
    shrinkage: float | None = None,
) -> CovarianceEstimate:
    """Estimate the reconciliation weight matrix for ``method``.

    ``shrinkage`` overrides the data-driven intensity for ``cov``/``kcov``.
    """
    if method not in METHODS:
        raise CovarianceError(f"unknown method {method!r}; expected one of {METHODS}")
    n = S.n
    if method == "id":
        return CovarianceEstimate("id", np.eye(n), np.eye(n, dtype=np.int64))
    if method == "str":
        return CovarianceEstimate("str", np.diag(structural_vector(S)), np.eye(n, dtype=np.int64))

    if residuals is None:
        raise CovarianceError(f"method {method!r} needs residuals")
    E = residuals.aligned(S.layout)
    level_of = dict(level_of) if level_of is not None else S.level_of()
    levels = [level_of[lab] for lab in S.layout]

    if method in ("svar", "hvar"):
        _require_samples(E, 2, method)
        var = _node_variances(E)
        if method == "svar":
            pooled = np.empty_like(var)
            for key in dict.fromkeys(levels):
                sel = np.array([x == key for x in levels])
                pooled[sel] = var[sel].mean()
            var = pooled
        return CovarianceEstimate(method, np.diag(var), np.eye(n, dtype=np.int64))

    _require_samples(E, 3, method)
    mask = topological_mask(method, levels)
    sigma, lam = _shrunk(E, mask, shrinkage)
    return CovarianceEstimate(method, ensure_positive_definite(sigma), mask, lam)


def compose_mask(mask_A: np.ndarray, mask_B: np.ndarray, cap: int = COMPOSE_ENTRY_CAP) -> np.ndarray:
    """Kronecker product of two topological masks."""
    mask_A = np.asarray(mask_A, dtype=np.int64)
    mask_B = np.asarray(mask_B, dtype=np.int64)
    for name, mk in (("mask_A", mask_A), ("mask_B", mask_B)):
        if mk.ndim != 2 or mk.shape[0] != mk.shape[1]:
            raise CovarianceError(f"{name} must be square, got shape {mk.shape}")
    size = (mask_A.shape[0] * mask_B.shape[0]) ** 2
    if size > cap:
        raise HierarchyError(f"composed mask with {size} entries exceeds the cap of {cap}")
    return np.kron(mask_A, mask_B)


def populate(
    mask: np.ndarray,
    residuals: ResidualStore,
    layout: YLayout | Sequence,
    method: str | None = None,
) -> CovarianceEstimate:
    """Fill ``mask`` with sample moments of ``residuals``.

    The diagonal always holds (floored) variances; off-diagonal positions
    outside the mask are zero.
    """
    mask = np.asarray(mask, dtype=np.int64)
    E = residuals.aligned(layout)
    if mask.shape != (E.shape[1], E.shape[1]):
        raise CovarianceError(f"mask shape {mask.shape} does not match {E.shape[1]} nodes")
    _require_samples(E, 2, "populate")
    var = _node_variances(E)
    C = np.cov(E, rowvar=False, ddof=1).reshape(E.shape[1], E.shape[1])
    sigma = C * mask
    np.fill_diagonal(sigma, var)
    if method is None:
        if np.array_equal(mask, np.eye(len(var), dtype=np.int64)):
            method = "hvar"
        elif mask.all():
            method = "cov"
        else:
            method = "kcov"
    return CovarianceEstimate(method, ensure_positive_definite(sigma), mask)


def estimate_composed(
    method_A: str,
    method_B: str,
    S: SummationMatrix,
    levels_A: Sequence,
    levels_B: Sequence,
    residuals: ResidualStore,
) -> CovarianceEstimate:
    """Multi-dimensional estimate from composed masks filled with joint residuals."""
    mask = compose_mask(topological_mask(method_A, levels_A), topological_mask(method_B, levels_B))
    return populate(mask, residuals, S.layout, method=f"{method_A}o{method_B}")


# -- text format ---------------------------------------------------------------


def dumps_estimate(est: CovarianceEstimate) -> str:
    buf = io.StringIO()
    lam = "nan" if est.shrinkage is None else repr(float(est.shrinkage))
    buf.write(f"n\t{est.n}\nmethod\t{est.method}\nlambda\t{lam}\n")
    for row in est.sigma:
        buf.write("\t".join(repr(float(x)) for x in row) + "\n")
    return buf.getvalue()


def loads_estimate(text: str) -> CovarianceEstimate:
    lines = text.strip("\n").split("\n")
    header = dict(line.split("\t", 1) for line in lines[:3])
    n = int(header["n"])
    lam = float(header["lambda"])
    sigma = np.array([[float(x) for x in line.split("\t")] for line in lines[3 : 3 + n]])
    if sigma.shape != (n, n):
        raise CovarianceError(f"expected a {n}x{n} matrix, got {sigma.shape}")
    if header["method"] in DIAGONAL_METHODS:
        mask = np.eye(n, dtype=np.int64)
    else:
        mask = (sigma != 0).astype(np.int64)
        np.fill_diagonal(mask, 1)
    return CovarianceEstimate(header["method"], sigma, mask, None if math.isnan(lam) else lam)
