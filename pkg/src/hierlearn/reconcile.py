"""Forecast reconciliation.

GLS reconciliation projects base forecasts onto the coherent subspace,
``y~ = S (S' W S)^-1 S' W y^`` with ``W = Sigma^-1``. Bottom-up keeps the leaf
forecasts and re-aggregates. :func:`reconcile_oracle` solves the same
minimization along an unrelated code path and exists for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .covariance import CovarianceEstimate, ResidualStore, estimate
from .hierarchy import SummationMatrix, YLayout, bottom_extractor, coherency_residual

COHERENCY_RTOL = 1e-8
ORACLE_MAX_N = 200

TAGS = ("base", "multi-task", "hierarchical", "reconciled")


class ReconciliationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ForecastBundle:
    """Forecast vectors in layout order, one row per forecast origin."""

    origins: tuple
    values: np.ndarray
    layout: YLayout
    tag: str = "base"
    provenance: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape != (len(self.origins), len(self.layout)):
            raise ReconciliationError(
                f"values shape {values.shape} does not match "
                f"{len(self.origins)} origins x {len(self.layout)} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise ReconciliationError("forecast values must be finite")
        if self.tag not in TAGS:
            raise ReconciliationError(f"unknown tag {self.tag!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origins", tuple(self.origins))

    def with_values(self, values, tag: str, provenance: str | None) -> "ForecastBundle":
        return replace(self, values=values, tag=tag, provenance=provenance)


def _sigma_of(sigma) -> np.ndarray:
    return sigma.sigma if isinstance(sigma, CovarianceEstimate) else np.asarray(sigma, dtype=float)


def _is_diagonal(mat: np.ndarray) -> bool:
    return not np.any(mat - np.diag(np.diagonal(mat)))


class GLSProjection:
    """Factorized ``(S' W S)`` for one ``(S, Sigma)`` pairing.

    Immutable after construction, so one instance can serve concurrent
    readers reconciling different forecast origins.
    """

    def __init__(self, S: SummationMatrix, sigma):
        mat = _sigma_of(sigma)
        if mat.shape != (S.n, S.n):
            raise ReconciliationError(f"Sigma is {mat.shape}, expected {(S.n, S.n)}")
        self.S = S
        Smat = S.matrix.astype(float) if S.is_sparse else np.asarray(S.matrix, dtype=float)
        if _is_diagonal(mat):
            d = np.diagonal(mat)
            if np.any(d <= 0):
                raise ReconciliationError("Sigma must have a positive diagonal")
            w = 1.0 / d
            WS = sparse.diags(w) @ Smat if S.is_sparse else w[:, None] * Smat
        else:
            try:
                chol = linalg.cho_factor(mat)
            except linalg.LinAlgError as exc:
                raise ReconciliationError("Sigma is not positive definite") from exc
            WS = linalg.cho_solve(chol, S.dense().astype(float))
        A = Smat.T @ WS
        A = A.toarray() if sparse.issparse(A) else np.asarray(A)
        try:
            self._factor = linalg.cho_factor(A)
        except linalg.LinAlgError as exc:
            raise ReconciliationError(
                "S' Sigma^-1 S is singular; the tree and Sigma are incompatible"
            ) from exc
        self._WS = WS
        self._S = Smat

    def leaves(self, yhat: np.ndarray) -> np.ndarray:
        """Reconciled leaf values for rows of ``yhat``."""
        rhs = np.asarray(self._WS.T @ np.atleast_2d(yhat).T)
        return linalg.cho_solve(self._factor, rhs).T

    def __call__(self, yhat) -> np.ndarray:
        yhat = np.asarray(yhat, dtype=float)
        if yhat.shape[-1] != self.S.n:
            raise ReconciliationError(f"forecast length {yhat.shape[-1]} != n={self.S.n}")
        out = np.asarray(self._S @ self.leaves(yhat).T).T
        return out.reshape(yhat.shape)

    def matrix(self) -> np.ndarray:
        """Dense ``n x n`` reconciliation map."""
        return self(np.eye(self.S.n)).T


def projection_matrix(S: SummationMatrix, sigma) -> np.ndarray:
    return GLSProjection(S, sigma).matrix()


def _apply(func, yhat, tag: str, provenance: str | None):
    if isinstance(yhat, ForecastBundle):
        return yhat.with_values(func(yhat.values), tag, provenance)
    return func(np.asarray(yhat, dtype=float))


def reconcile_gls(S: SummationMatrix, sigma, yhat):
    """GLS reconciliation of a vector, an ``(h, n)`` array, or a bundle."""
    proj = GLSProjection(S, sigma)
    method = sigma.method if isinstance(sigma, CovarianceEstimate) else "custom"
    return _apply(proj, yhat, "reconciled", method)


def reconcile_bottom_up(S: SummationMatrix, G, yhat):
    """``S G y^``: keep the leaf forecasts, recompute every aggregate."""

    def run(y):
        if y.shape[-1] != S.n:
            raise ReconciliationError(f"forecast length {y.shape[-1]} != n={S.n}")
        return y - coherency_residual(S, G, y)

    return _apply(run, yhat, "reconciled", "bu")


def _eliminate(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` by Gaussian elimination with partial pivoting."""
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    scale = np.abs(A).max() or 1.0
    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[piv, col]) <= 1e-14 * scale:
            raise ReconciliationError("singular system in oracle elimination")
        if piv != col:
            A[[col, piv]] = A[[piv, col]]
            B[[col, piv]] = B[[piv, col]]
        factors = A[col + 1 :, col] / A[col, col]
        A[col + 1 :] -= np.outer(factors, A[col])
        B[col + 1 :] -= np.outer(factors, B[col])
    X = np.zeros_like(B)
    for row in range(n - 1, -1, -1):
        X[row] = (B[row] - A[row, row + 1 :] @ X[row + 1 :]) / A[row, row]
    return X


def reconcile_oracle(S: SummationMatrix, sigma, yhat):
    """Constrained least squares by substitution ``y~ = S b`` and dense elimination."""
    if S.n > ORACLE_MAX_N:
        raise ReconciliationError(f"oracle is capped at n={ORACLE_MAX_N}, got {S.n}")
    Smat = S.dense().astype(float)
    Sig = _sigma_of(sigma)

    def run(y):
        rows = np.atleast_2d(y)
        SigInvS = _eliminate(Sig, Smat)
        normal = Smat.T @ SigInvS
        b = _eliminate(normal, SigInvS.T @ rows.T)
        return (Smat @ b).T.reshape(y.shape)

    return _apply(run, yhat, "reconciled", "oracle")


def is_coherent(S: SummationMatrix, y, rtol: float = COHERENCY_RTOL) -> bool:
    y = np.asarray(y, dtype=float)
    res = coherency_residual(S, bottom_extractor(S), y)
    return bool(np.max(np.abs(res), initial=0.0) <= rtol * (1.0 + np.max(np.abs(y), initial=0.0)))


class GLSReconciler(TransformerMixin, BaseEstimator):
    """Reconciler with the scikit-learn fit/transform protocol.

    Parameters
    ----------
    structure : SummationMatrix
        Hierarchy the forecasts live on.
    method : str, default="id"
        Covariance estimator, one of ``id, str, svar, hvar, cov, kcov``, or
        ``"bu"`` for bottom-up aggregation.
    shrinkage : float or None
        Fixed shrinkage intensity for ``cov``/``kcov``; estimated when None.

    Attributes
    ----------
    covariance_ : CovarianceEstimate or None
    projection_ : GLSProjection or None
    """

    def __init__(self, structure: SummationMatrix | None = None, method: str = "id", shrinkage: float | None = None):
        self.structure = structure
        self.method = method
        self.shrinkage = shrinkage

    def fit(self, X=None, y=None):
        """Estimate Sigma from residuals ``X`` of shape ``(h, n)``.

        ``X`` is ignored by ``id``, ``str`` and ``bu``.
        """
        S = self.structure
        if S is None:
            raise ReconciliationError("structure must be set before fit")
        if self.method == "bu":
            self.covariance_ = None
            self.projection_ = None
            self.extractor_ = bottom_extractor(S)
        else:
            store = None
            if X is not None:
                X = np.asarray(X, dtype=float)
                if X.ndim != 2 or X.shape[1] != S.n:
                    raise ReconciliationError(f"residuals must have shape (h, {S.n}), got {X.shape}")
                store = ResidualStore(S.layout.labels, X)
            self.covariance_ = estimate(self.method, S, store, shrinkage=self.shrinkage)
            self.projection_ = GLSProjection(S, self.covariance_)
        self.n_features_in_ = S.n
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features_in_:
            raise ReconciliationError(f"expected {self.n_features_in_} columns, got {X.shape[-1]}")
        if self.method == "bu":
            return reconcile_bottom_up(self.structure, self.extractor_, X)
        return self.projection_(X)
