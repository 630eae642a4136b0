"""Feed-forward multi-task regressor with a coherency-informed loss.

Three forecasting modes are supported:

* ``base``: one single-output network per node, plain MSE.
* ``multi-task``: one network emitting all ``n`` nodes, MSE averaged over
  nodes (``alpha = 1``).
* ``hierarchical``: the multi-task network trained on
  ``alpha * L_h + (1 - alpha) * L_c`` where ``L_c`` measures how far the
  outputs move under GLS reconciliation.

Targets are standardized per series. The coherency term undoes the scaling,
reconciles in original units, and re-applies the scaling before comparing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .covariance import CovarianceEstimate, ResidualStore, estimate
from .hierarchy import SummationMatrix
from .reconcile import GLSProjection, reconcile_gls

log = logging.getLogger(__name__)

MODES = ("base", "multi-task", "hierarchical")
ACTIVATIONS = ("sigmoid", "linear")
STD_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


# -- configuration and parameters -------------------------------------------


def geometric_sizes(n_in: int, n_out: int, layers: int = 3) -> tuple[int, ...]:
    """Layer widths shrinking geometrically from ``n_in`` to ``n_out``."""
    ratio = n_out / n_in
    hidden = [max(1, int(round(n_in * ratio ** (i / layers)))) for i in range(1, layers)]
    return (n_in, *hidden, n_out)


@dataclass(frozen=True)
class NetConfig:
    layer_sizes: tuple
    activations: tuple
    dropout: tuple
    alpha: float = 0.75
    learning_rate: float = 1e-3
    momentum: float = 0.9
    clip_norm: float = 5.0
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        n_layers = len(self.layer_sizes) - 1
        if n_layers < 1:
            raise ValueError("need at least an input and an output size")
        if len(self.activations) != n_layers or len(self.dropout) != n_layers:
            raise ValueError("one activation and one dropout rate per weight layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ValueError(f"activations must be in {ACTIVATIONS}")
        if self.activations[-1] != "linear" or self.dropout[-1] != 0:
            raise ValueError("the output layer must be linear without dropout")
        if any(not 0 <= p < 1 for p in self.dropout):
            raise ValueError("dropout rates must lie in [0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def default(
        cls,
        n_in: int,
        n_out: int,
        layers: int = 3,
        activation: str = "sigmoid",
        dropout: float = 0.2,
        **kw,
    ) -> "NetConfig":
        sizes = geometric_sizes(n_in, n_out, layers)
        acts = (activation,) * (layers - 1) + ("linear",)
        drops = (dropout,) * (layers - 1) + (0.0,)
        return cls(sizes, acts, drops, **kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class NetModel:
    weights: list
    biases: list
    activations: tuple
    dropout: tuple

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "NetModel":
        return NetModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations, self.dropout)


def init_model(config: NetConfig, rng: np.random.Generator | int | None = None) -> NetModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_sizes, config.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetModel(weights, biases, tuple(config.activations), tuple(config.dropout))


# -- scaler ---------------------------------------------------------------------


@dataclass
class Scaler:
    """Per-series standardization fitted on training rows only."""

    labels: tuple = ()
    mean: np.ndarray = field(default_factory=lambda: np.empty(0))
    std: np.ndarray = field(default_factory=lambda: np.empty(0))
    fitted_until: Any = None

    @property
    def fitted(self) -> bool:
        return self.mean.size > 0 or len(self.labels) > 0

    def fit(self, X, labels: Sequence | None = None, fitted_until=None) -> "Scaler":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.labels = tuple(range(X.shape[1])) if labels is None else tuple(labels)
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.std = np.where(sd > STD_FLOOR * (1.0 + np.abs(self.mean)), sd, 1.0)
        self.fitted_until = fitted_until
        return self

    def _check(self, X, start) -> np.ndarray:
        if not self.fitted:
            raise TrainingError("scaler used before fit")
        if start is not None and self.fitted_until is not None and not self.fitted_until < start:
            raise TrainingError(
                f"leakage: scaler fitted through {self.fitted_until!r} used on data from {start!r}"
            )
        return np.asarray(X, dtype=float)

    def transform(self, X, start=None) -> np.ndarray:
        return (self._check(X, start) - self.mean) / self.std

    def inverse_transform(self, Z) -> np.ndarray:
        return self._check(Z, None) * self.std + self.mean

    @classmethod
    def identity(cls, n: int) -> "Scaler":
        return cls(tuple(range(n)), np.zeros(n), np.ones(n))


# -- forward / losses ------------------------------------------------------------


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    return a


def _forward(model: NetModel, X: np.ndarray, training: bool, rng) -> tuple[np.ndarray, list]:
    if X.shape[-1] != model.weights[0].shape[0]:
        raise ValueError(f"input has {X.shape[-1]} features, model expects {model.weights[0].shape[0]}")
    cache = []
    h = X
    for W, b, act, p in zip(model.weights, model.biases, model.activations, model.dropout):
        act_out = _activate(act, h @ W + b)
        mask = None
        out = act_out
        if training and p > 0:
            mask = (rng.random(out.shape) >= p) / (1.0 - p)
            out = act_out * mask
        cache.append((h, act_out, mask))
        h = out
    if not np.all(np.isfinite(h)):
        raise TrainingError("non-finite activation in forward pass")
    return h, cache


def forward(model: NetModel, x, training: bool = False, rng=None) -> np.ndarray:
    """Network output for one feature vector or a batch of rows.

    Dropout masks are drawn from ``rng`` (a Generator or seed) only when
    ``training`` is set.
    """
    X = np.asarray(x, dtype=float)
    rng = np.random.default_rng(rng) if training and not isinstance(rng, np.random.Generator) else rng
    out, _ = _forward(model, np.atleast_2d(X), training, rng)
    return out.reshape(-1) if X.ndim == 1 else out


def loss_base(y, yhat) -> float:
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.size == 0 or y.shape != yhat.shape:
        raise ValueError("loss_base needs equal, non-empty sequences")
    return float(np.mean((y - yhat) ** 2))


def loss_hierarchical(Y, Yhat) -> float:
    """Squared error vectors averaged over nodes, then over time."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Yhat = np.atleast_2d(np.asarray(Yhat, dtype=float))
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Yhat.shape}")
    return float(np.mean((Y - Yhat) ** 2))


def loss_coherency(Yhat_z, scaler: Scaler, S: SummationMatrix, sigma) -> float:
    """Distance in scaled units between outputs and their reconciled version."""
    Yhat_z = np.atleast_2d(np.asarray(Yhat_z, dtype=float))
    if not scaler.fitted:
        raise TrainingError("scaler must be fitted for the coherency loss")
    Yhat_x = scaler.inverse_transform(Yhat_z)
    Ytil_x = reconcile_gls(S, sigma, Yhat_x)
    Ytil_z = scaler.transform(Ytil_x)
    return float(np.mean((Yhat_z - Ytil_z) ** 2))


def loss_combined(Y, Yhat_z, scaler: Scaler, S: SummationMatrix, sigma, alpha: float) -> float:
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    lh = loss_hierarchical(Y, Yhat_z)
    if alpha == 1:
        return lh
    return alpha * lh + (1 - alpha) * loss_coherency(Yhat_z, scaler, S, sigma)


class CoherencyMap:
    """Affine map from scaled outputs to their coherency gap.

    For output rows ``z`` the gap is ``z @ A - c`` where ``A = I - K``,
    ``K = diag(s) M' diag(1/s)`` and ``c = (u M' - u) / s``, with ``M`` the
    GLS reconciliation map and ``(u, s)`` the target scaler. Built once per
    Sigma update and reused for every mini-batch.
    """

    def __init__(self, S: SummationMatrix, sigma, scaler: Scaler):
        M = GLSProjection(S, sigma).matrix()
        s, u = scaler.std, scaler.mean
        K = (s[:, None] * M.T) / s[None, :]
        self.A = np.eye(S.n) - K
        self.c = (u @ M.T - u) / s

    def gap(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.A - self.c


def output_gradient(Y, Yhat, alpha: float = 1.0, coherency: CoherencyMap | None = None) -> tuple[float, np.ndarray]:
    """Combined loss and its gradient with respect to the network outputs."""
    h, n = Yhat.shape
    diff = Yhat - Y
    loss = float(np.mean(diff**2))
    grad = (2.0 / (h * n)) * diff
    if coherency is None or alpha == 1:
        return loss, grad
    gap = coherency.gap(Yhat)
    lc = float(np.mean(gap**2))
    grad_c = (2.0 / (h * n)) * gap @ coherency.A.T
    return alpha * loss + (1 - alpha) * lc, alpha * grad + (1 - alpha) * grad_c


def backward(
    model: NetModel,
    X,
    Y,
    alpha: float = 1.0,
    coherency: CoherencyMap | None = None,
    training: bool = False,
    rng=None,
) -> tuple[float, list, list]:
    """Loss plus weight and bias gradients for a batch of rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if training and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out, cache = _forward(model, X, training, rng)
    if out.shape != Y.shape:
        raise ValueError(f"targets {Y.shape} do not match outputs {out.shape}")
    loss, delta = output_gradient(Y, out, alpha, coherency)
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        inp, act_out, mask = cache[i]
        if mask is not None:
            delta = delta * mask
        if model.activations[i] == "sigmoid":
            delta = delta * act_out * (1.0 - act_out)
        gW[i] = inp.T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
    if not all(np.all(np.isfinite(g)) for g in gW + gb):
        raise TrainingError("non-finite gradient")
    return loss, gW, gb


def fit_network(
    model: NetModel,
    X: np.ndarray,
    Y: np.ndarray,
    config: NetConfig,
    coherency: CoherencyMap | None = None,
    alpha: float | None = None,
) -> list[float]:
    """Mini-batch SGD with momentum and global-norm clipping, in place."""
    alpha = config.alpha if alpha is None else alpha
    rng = np.random.default_rng(config.seed + 1)
    vel_W = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    n_rows = X.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_rows)
        total = 0.0
        for start in range(0, n_rows, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, gW, gb = backward(model, X[idx], Y[idx], alpha, coherency, training=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, rows {idx[:5].tolist()}...")
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in gW + gb))
            scale = min(1.0, config.clip_norm / norm) if norm > 0 else 1.0
            for i in range(len(model.weights)):
                vel_W[i] = config.momentum * vel_W[i] - config.learning_rate * scale * gW[i]
                vel_b[i] = config.momentum * vel_b[i] - config.learning_rate * scale * gb[i]
                model.weights[i] += vel_W[i]
                model.biases[i] += vel_b[i]
            total += loss * len(idx)
        history.append(total / n_rows)
        if not np.isfinite(history[-1]):
            raise TrainingError(f"training diverged at epoch {epoch}: loss {history[-1]}")
    return history


# -- estimator -----------------------------------------------------------------


class HierarchicalRegressor(RegressorMixin, BaseEstimator):
    """Multi-output regressor over a hierarchy, scikit-learn style.

    Parameters
    ----------
    structure : SummationMatrix
        Needed by ``hierarchical`` mode for the coherency term.
    mode : {"base", "multi-task", "hierarchical"}
    alpha : float
        Weight of the accuracy term; forced to 1 outside ``hierarchical``.
    sigma : CovarianceEstimate or None
        Weight matrix of the coherency term; identity when None.
    node_features : list of index arrays or None
        ``base`` mode only: feature columns seen by each node's network.
    clamp_quantile : float or None
        When set, predictions in original units are floored at this quantile
        of the training targets. Off by default.
    """

    def __init__(
        self,
        structure: SummationMatrix | None = None,
        mode: str = "hierarchical",
        alpha: float = 0.75,
        sigma: CovarianceEstimate | None = None,
        layers: int = 3,
        activation: str = "sigmoid",
        dropout: float = 0.2,
        learning_rate: float = 1e-3,
        momentum: float = 0.9,
        clip_norm: float = 5.0,
        epochs: int = 100,
        batch_size: int = 32,
        seed: int = 0,
        node_features: Sequence | None = None,
        clamp_quantile: float | None = None,
    ):
        self.structure = structure
        self.mode = mode
        self.alpha = alpha
        self.sigma = sigma
        self.layers = layers
        self.activation = activation
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.node_features = node_features
        self.clamp_quantile = clamp_quantile

    def _config(self, n_in: int, n_out: int, alpha: float, seed: int) -> NetConfig:
        return NetConfig.default(
            n_in,
            n_out,
            layers=self.layers,
            activation=self.activation,
            dropout=self.dropout,
            alpha=alpha,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            clip_norm=self.clip_norm,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
        )

    def fit(self, X, y, origins: Sequence | None = None):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        X = check_array(X)
        Y = check_array(y, ensure_2d=False)
        Y = Y.reshape(len(Y), -1)
        until = None if origins is None else origins[-1]
        self.x_scaler_ = Scaler().fit(X, fitted_until=until)
        self.y_scaler_ = Scaler().fit(Y, fitted_until=until)
        Xz = self.x_scaler_.transform(X)
        Yz = self.y_scaler_.transform(Y)
        n = Y.shape[1]
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = n
        self.history_ = []
        if self.mode == "base":
            cols = self.node_features or [np.arange(X.shape[1])] * n
            if len(cols) != n:
                raise ValueError(f"node_features lists {len(cols)} nodes, targets have {n}")
            self.columns_ = [np.asarray(c, dtype=int) for c in cols]
            self.models_ = []
            for j in range(n):
                cfg = self._config(len(self.columns_[j]), 1, 1.0, self.seed + j)
                model = init_model(cfg)
                self.history_.append(fit_network(model, Xz[:, self.columns_[j]], Yz[:, [j]], cfg))
                self.models_.append(model)
        else:
            alpha = 1.0 if self.mode == "multi-task" else float(self.alpha)
            coherency = None
            if alpha < 1:
                if self.structure is None or self.structure.n != n:
                    raise ValueError("hierarchical mode needs a structure matching the targets")
                sigma = self.sigma if self.sigma is not None else estimate("id", self.structure)
                coherency = CoherencyMap(self.structure, sigma, self.y_scaler_)
            cfg = self._config(X.shape[1], n, alpha, self.seed)
            model = init_model(cfg)
            self.history_.append(fit_network(model, Xz, Yz, cfg, coherency))
            self.models_ = [model]
            self.config_ = cfg
        if self.clamp_quantile is not None:
            self.floor_ = np.quantile(Y, self.clamp_quantile, axis=0)
        return self

    def predict_scaled(self, X, origins: Sequence | None = None) -> np.ndarray:
        check_is_fitted(self, "models_")
        X = check_array(X)
        start = None if origins is None else origins[0]
        Xz = self.x_scaler_.transform(X, start=start)
        if self.mode == "base":
            return np.column_stack([forward(m, Xz[:, c]) for m, c in zip(self.models_, self.columns_)])
        return forward(self.models_[0], Xz)

    def predict(self, X, origins: Sequence | None = None) -> np.ndarray:
        """Forecasts in original units, one column per node."""
        out = self.y_scaler_.inverse_transform(self.predict_scaled(X, origins))
        if self.clamp_quantile is not None:
            out = np.maximum(out, self.floor_)
        return out

    def checkpoint(self) -> dict:
        """JSON-ready dump: config echo, seed and row-major weights."""
        check_is_fitted(self, "models_")
        params = {k: v for k, v in self.get_params().items() if k not in ("structure", "sigma", "node_features")}
        return {
            "params": params,
            "seed": self.seed,
            "scalers": {
                "x_mean": self.x_scaler_.mean.tolist(),
                "x_std": self.x_scaler_.std.tolist(),
                "y_mean": self.y_scaler_.mean.tolist(),
                "y_std": self.y_scaler_.std.tolist(),
            },
            "models": [
                {
                    "activations": list(m.activations),
                    "dropout": list(m.dropout),
                    "shapes": [list(w.shape) for w in m.weights],
                    "weights": [w.ravel().tolist() for w in m.weights],
                    "biases": [b.tolist() for b in m.biases],
                }
                for m in self.models_
            ],
        }


def save_checkpoint(reg: HierarchicalRegressor, path) -> None:
    with open(path, "w") as fh:
        json.dump(reg.checkpoint(), fh)


def load_models(doc: dict) -> list[NetModel]:
    out = []
    for m in doc["models"]:
        weights = [np.array(w, dtype=float).reshape(s) for w, s in zip(m["weights"], m["shapes"])]
        biases = [np.array(b, dtype=float) for b in m["biases"]]
        out.append(NetModel(weights, biases, tuple(m["activations"]), tuple(m["dropout"])))
    return out


# -- rolling training ------------------------------------------------------------


@dataclass
class WindowedDataset:
    """Feature rows aligned with target rows, plus the rolling batch plan.

    ``plan.batches`` yields ``(train_index, test_index)`` pairs of row indices.
    """

    X: np.ndarray
    Y: np.ndarray
    origins: Sequence
    plan: Any
    structure: SummationMatrix
    leaf_columns: np.ndarray | None = None
    node_columns: list | None = None


@dataclass
class BatchResult:
    index: int
    train_rows: np.ndarray
    test_rows: np.ndarray
    forecasts: np.ndarray
    train_residuals: np.ndarray
    test_residuals: np.ndarray
    sigma_method: str
    regressor: HierarchicalRegressor


def train(
    mode: str,
    data: WindowedDataset,
    params: dict | None = None,
    schedule: str = "hvar",
) -> list[BatchResult]:
    """Train one regressor per rolling batch and forecast its test window.

    In ``hierarchical`` mode the first batch uses the identity weight matrix;
    batch ``i + 1`` uses the ``schedule`` estimate from batch ``i``'s test
    residuals.
    """
    params = dict(params or {})
    batches = list(data.plan.batches)
    if len(batches) < 1:
        raise TrainingError("no rolling windows to train on")
    S = data.structure
    sigma = estimate("id", S)
    results = []
    for i, (tr, te) in enumerate(batches):
        if mode == "base":
            X_tr, X_te = data.X[tr], data.X[te]
            reg = HierarchicalRegressor(S, mode="base", node_features=data.node_columns, **params)
        else:
            cols = data.leaf_columns if data.leaf_columns is not None else np.arange(data.X.shape[1])
            X_tr, X_te = data.X[tr][:, cols], data.X[te][:, cols]
            reg = HierarchicalRegressor(S, mode=mode, sigma=sigma, **params)
        o_tr = [data.origins[k] for k in tr]
        o_te = [data.origins[k] for k in te]
        reg.fit(X_tr, data.Y[tr], origins=o_tr)
        pred = reg.predict(X_te, origins=o_te)
        train_res = reg.predict(X_tr) - data.Y[tr]
        test_res = pred - data.Y[te]
        used = sigma.method if mode == "hierarchical" else "none"
        log.info("batch %d (%s): sigma=%s, test MSE %.4g", i, mode, used, float(np.mean(test_res**2)))
        results.append(BatchResult(i, np.asarray(tr), np.asarray(te), pred, train_res, test_res, used, reg))
        if mode == "hierarchical":
            sigma = estimate(schedule, S, ResidualStore(S.layout.labels, test_res))
    return results
