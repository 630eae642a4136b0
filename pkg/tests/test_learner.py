import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd
from gradcheck import combined_loss, max_relative_error, numeric_gradients
from hierlearn.covariance import estimate
from hierlearn.hierarchy import aggregate, build_tree, summation_matrix
from hierlearn.learner import (
    CoherencyMap,
    HierarchicalRegressor,
    NetConfig,
    Scaler,
    TrainingError,
    WindowedDataset,
    backward,
    fit_network,
    forward,
    geometric_sizes,
    init_model,
    load_models,
    loss_base,
    loss_coherency,
    loss_combined,
    save_checkpoint,
    train,
)
from hierlearn.pipeline.windows import plan_windows

TINY = summation_matrix(build_tree([("t", "a"), ("t", "b")]))


def small_net(n_in, n_out, hidden=5, dropout=0.0, seed=0):
    cfg = NetConfig((n_in, hidden, n_out), ("sigmoid", "linear"), (dropout, 0.0), seed=seed)
    return init_model(cfg)


def coherent_problem(rng, h=12):
    X = rng.normal(size=(h, 4))
    leaves = X[:, :2] @ rng.normal(size=(2, 2)) + 5.0
    Y = aggregate(TINY, leaves)
    scaler = Scaler().fit(Y)
    return X, Y, scaler


def test_geometric_sizes():
    assert geometric_sizes(27, 1, 3) == (27, 9, 3, 1)
    assert geometric_sizes(4, 4, 2) == (4, 4, 4)


def test_config_validation():
    with pytest.raises(ValueError, match="linear"):
        NetConfig((3, 2), ("sigmoid",), (0.0,))
    with pytest.raises(ValueError, match="alpha"):
        NetConfig((3, 2), ("linear",), (0.0,), alpha=1.5)
    with pytest.raises(ValueError, match="dropout"):
        NetConfig((3, 4, 2), ("sigmoid", "linear"), (1.0, 0.0))


def test_scaler_round_trip_and_floor():
    X = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    sc = Scaler().fit(X, fitted_until=4)
    assert sc.std[1] == 1.0
    assert np.allclose(sc.inverse_transform(sc.transform(X)), X)
    with pytest.raises(TrainingError, match="leakage"):
        sc.transform(X, start=4)
    sc.transform(X, start=5)
    with pytest.raises(TrainingError, match="before fit"):
        Scaler().transform(X)


def test_base_loss_gradient(rng):
    model = small_net(4, 1)
    X, y = rng.normal(size=(10, 4)), rng.normal(size=(10, 1))
    _, gW, gb = backward(model, X, y)
    nW, nb = numeric_gradients(model, lambda: loss_base(y, forward(model, X)))
    assert max_relative_error(gW + gb, nW + nb) < 1e-4


@pytest.mark.parametrize("alpha", [1.0, 0.75, 0.0])
@pytest.mark.parametrize("dropout", [0.0, 0.2])
def test_hierarchical_and_coherency_gradients(rng, alpha, dropout):
    X, Y, scaler = coherent_problem(rng)
    Yz = scaler.transform(Y)
    sigma = random_spd(rng, 3)
    model = small_net(4, 3, dropout=dropout)
    assert model.n_params <= 100
    cmap = CoherencyMap(TINY, sigma, scaler)
    loss, gW, gb = backward(model, X, Yz, alpha, cmap, training=dropout > 0, rng=np.random.default_rng(7))

    def ref():
        return combined_loss(model, X, Yz, alpha, scaler, TINY, sigma, training=dropout > 0, seed=7)

    assert loss == pytest.approx(ref(), rel=1e-10)
    nW, nb = numeric_gradients(model, ref)
    assert max_relative_error(gW + gb, nW + nb) < 1e-4


def test_coherency_map_matches_round_trip(rng):
    _, Y, scaler = coherent_problem(rng)
    sigma = estimate("str", TINY)
    cmap = CoherencyMap(TINY, sigma, scaler)
    Z = rng.normal(size=(6, 3))
    assert np.mean(cmap.gap(Z) ** 2) == pytest.approx(loss_coherency(Z, scaler, TINY, sigma), rel=1e-10)
    assert loss_coherency(scaler.transform(Y), scaler, TINY, sigma) == pytest.approx(0.0, abs=1e-20)
    assert loss_combined(Y[:6], Z, scaler, TINY, sigma, 1.0) == pytest.approx(np.mean((Y[:6] - Z) ** 2))


def test_training_reduces_loss(rng):
    X = rng.normal(size=(200, 3))
    Y = np.sin(X[:, :1]) + 0.5 * X[:, 1:2]
    cfg = NetConfig((3, 8, 1), ("sigmoid", "linear"), (0.0, 0.0), learning_rate=0.05, epochs=60)
    model = init_model(cfg)
    hist = fit_network(model, X, Y, cfg)
    assert hist[-1] < 0.5 * hist[0]


def test_gradient_clipping_bounds_steps(rng):
    X = rng.normal(size=(16, 3)) * 1e3
    Y = rng.normal(size=(16, 1)) * 1e6
    cfg = NetConfig((3, 4, 1), ("sigmoid", "linear"), (0.0, 0.0), learning_rate=1.0, momentum=0.0, clip_norm=1.0, epochs=1, batch_size=16)
    model = init_model(cfg)
    before = [w.copy() for w in model.weights] + [b.copy() for b in model.biases]
    fit_network(model, X, Y, cfg)
    after = model.weights + model.biases
    step = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(after, before)))
    assert step <= 1.0 + 1e-9


def fit_pair(mode, seed, rng_seed=0, **kw):
    rng = np.random.default_rng(rng_seed)
    X = rng.normal(size=(60, 4))
    Y = aggregate(TINY, np.abs(X[:, :2]) + 1.0)
    reg = HierarchicalRegressor(TINY, mode=mode, epochs=15, seed=seed, **kw).fit(X, Y)
    return reg, X, Y


@pytest.mark.parametrize("mode", ["base", "multi-task", "hierarchical"])
def test_regressor_is_deterministic(mode):
    a, X, _ = fit_pair(mode, seed=3)
    b, _, _ = fit_pair(mode, seed=3)
    c, _, _ = fit_pair(mode, seed=4)
    assert np.array_equal(a.predict(X), b.predict(X))
    assert not np.array_equal(a.predict(X), c.predict(X))
    assert a.predict(X).shape == (60, 3)


def test_multi_task_ignores_alpha():
    a, X, _ = fit_pair("multi-task", seed=1, alpha=0.1)
    b, _, _ = fit_pair("multi-task", seed=1, alpha=0.9)
    assert np.array_equal(a.predict(X), b.predict(X))
    assert a.config_.alpha == 1.0


def test_base_mode_node_features():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 4))
    Y = aggregate(TINY, np.abs(X[:, :2]))
    reg = HierarchicalRegressor(TINY, mode="base", epochs=2, node_features=[[0, 1], [0], [1, 2, 3]]).fit(X, Y)
    assert [m.weights[0].shape[0] for m in reg.models_] == [2, 1, 3]
    with pytest.raises(ValueError, match="node_features"):
        HierarchicalRegressor(TINY, mode="base", epochs=1, node_features=[[0]]).fit(X, Y)


def test_clamp_quantile():
    reg, X, Y = fit_pair("multi-task", seed=0, clamp_quantile=0.5)
    assert np.all(reg.predict(X) >= np.quantile(Y, 0.5, axis=0) - 1e-12)


def test_prediction_leakage_guard():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 4))
    Y = aggregate(TINY, np.abs(X[:, :2]))
    reg = HierarchicalRegressor(TINY, mode="multi-task", epochs=1).fit(X, Y, origins=list(range(20)))
    reg.predict(X[:2], origins=[20, 21])
    with pytest.raises(TrainingError, match="leakage"):
        reg.predict(X[:2], origins=[19, 20])


def test_checkpoint_round_trip(tmp_path):
    reg, X, _ = fit_pair("hierarchical", seed=2)
    path = tmp_path / "ckpt.json"
    save_checkpoint(reg, path)
    doc = json.loads(path.read_text())
    assert doc["seed"] == 2 and doc["params"]["mode"] == "hierarchical"
    (model,) = load_models(doc)
    Xz = (X - np.array(doc["scalers"]["x_mean"])) / np.array(doc["scalers"]["x_std"])
    assert np.allclose(forward(model, Xz), reg.predict_scaled(X))


def test_rolling_train_schedule():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(50, 4))
    Y = aggregate(TINY, np.abs(X[:, :2]) + 1)
    data = WindowedDataset(X, Y, list(range(50)), plan_windows(50, 3, 5), TINY)
    params = {"epochs": 3, "alpha": 0.5}
    res = train("hierarchical", data, params, schedule="svar")
    assert [r.sigma_method for r in res] == ["id", "svar", "svar"]
    assert [len(r.test_rows) for r in res] == [5, 5, 5]
    assert res[1].train_rows[-1] == 39
    base = train("base", data, params)
    assert all(r.sigma_method == "none" for r in base)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_forward_shapes_and_batch_consistency(n_in, n_out, seed):
    model = small_net(n_in, n_out, seed=seed % 1000)
    X = np.random.default_rng(seed).normal(size=(7, n_in))
    out = forward(model, X)
    assert out.shape == (7, n_out)
    assert np.allclose(forward(model, X[3]), out[3])
