"""Acceptance criteria, one test per criterion at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance
criteria" section of the summary for one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest
from scipy import stats

from conftest import fig1_tree, random_spd, random_tree
from gradcheck import combined_loss, max_relative_error, numeric_gradients
from hierlearn.covariance import ResidualStore, estimate, level_mask
from hierlearn.hierarchy import (
    aggregate,
    bottom_extractor,
    build_tree,
    coherency_residual,
    compose,
    layout_permutation,
    structural_vector,
    summation_matrix,
    temporal_tree,
)
from hierlearn.learner import CoherencyMap, NetConfig, Scaler, backward, forward, init_model, loss_base
from hierlearn.metrics import ms3e, relmse, scaled_errors
from hierlearn.pipeline import load_config, run_experiment
from hierlearn.reconcile import reconcile_gls, reconcile_oracle
from hierlearn.synthetic import make_loads, write_long

EQ2 = np.array(
    [
        [1, 1, 1, 1, 1, 1],
        [1, 1, 1, 0, 0, 0],
        [0, 0, 0, 1, 1, 1],
        [1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0, 0, 1, 0, 0, 0],
        [0, 0, 0, 1, 0, 0],
        [0, 0, 0, 0, 1, 0],
        [0, 0, 0, 0, 0, 1],
    ]
)


def rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_criterion_1_summation_matrix_reproduction():
    t0 = time.perf_counter()
    S = summation_matrix(fig1_tree())
    assert S.dense().dtype.kind == "i"
    assert np.array_equal(S.dense(), EQ2)
    assert time.perf_counter() - t0 < 1.0


def test_criterion_2_structural_vector_reproduction():
    t0 = time.perf_counter()
    kappa = structural_vector(summation_matrix(fig1_tree()))
    assert kappa.tolist() == [6, 3, 3, 1, 1, 1, 1, 1, 1]
    assert time.perf_counter() - t0 < 1.0


def stub_tree(n, m, prefix):
    """Two-level-plus-root tree with exactly ``n`` nodes and ``m`` leaves."""
    k = n - m - 1
    edges = [(f"{prefix}r", f"{prefix}g{i}") for i in range(k)]
    edges += [(f"{prefix}g{j % k}", f"{prefix}l{j}") for j in range(m)]
    tree = build_tree(edges)
    assert (tree.n, tree.m) == (n, m)
    return tree


def test_criterion_3_composition_arithmetic():
    spatial = summation_matrix(build_tree([("A", "B"), ("A", "C")]))
    temporal = summation_matrix(build_tree([("T", "x"), ("T", "y"), ("x", "1"), ("x", "2"), ("y", "3"), ("y", "4")]))
    assert (spatial.n, spatial.m, temporal.n, temporal.m) == (3, 2, 7, 4)
    assert compose(spatial, temporal).shape == (21, 8)
    big = compose(summation_matrix(stub_tree(383, 192, "s")), summation_matrix(temporal_tree(24, (24, 6, 3, 1))))
    assert big.shape == (14171, 4608)
    assert big.is_sparse


def test_criterion_4_layout_equivalence():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        A = summation_matrix(random_tree(rng, 12, "a"))
        B = summation_matrix(random_tree(rng, 12, "b"))
        AoB, BoA = compose(A, B), compose(B, A)
        p = layout_permutation(AoB.layout, BoA.layout)
        sigma_BoA = random_spd(rng, BoA.n)
        y_BoA = rng.normal(size=BoA.n) * 5
        rec_BoA = reconcile_gls(BoA, sigma_BoA, y_BoA)
        rec_AoB = reconcile_gls(AoB, sigma_BoA[np.ix_(p, p)], y_BoA[p])
        worst = max(worst, rel(rec_AoB, rec_BoA[p]))
    print(f"worst relative deviation {worst:.3e}")
    assert worst <= 1e-9


def test_criterion_5_gls_matches_oracle():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = {"oracle": 0.0, "coherency": 0.0, "idempotence": 0.0, "scale": 0.0}
    for _ in range(100):
        S = summation_matrix(random_tree(rng, 50))
        sigma = random_spd(rng, S.n)
        y = rng.normal(size=S.n) * 10
        fast = reconcile_gls(S, sigma, y)
        worst["oracle"] = max(worst["oracle"], rel(fast, reconcile_oracle(S, sigma, y)))
        res = coherency_residual(S, bottom_extractor(S), fast)
        worst["coherency"] = max(worst["coherency"], float(np.max(np.abs(res)) / np.max(np.abs(fast))))
        worst["idempotence"] = max(worst["idempotence"], rel(reconcile_gls(S, sigma, fast), fast))
        c = float(rng.uniform(0.01, 100))
        worst["scale"] = max(worst["scale"], rel(reconcile_gls(S, c * sigma, y), fast))
    elapsed = time.perf_counter() - t0
    print({k: f"{v:.2e}" for k, v in worst.items()}, f"{elapsed:.2f}s")
    assert worst["oracle"] <= 1e-6
    assert worst["coherency"] <= 1e-8
    assert worst["idempotence"] <= 1e-9 and worst["scale"] <= 1e-9
    assert elapsed < 30


def test_criterion_6_estimator_identities():
    rng = np.random.default_rng(6)
    S = summation_matrix(fig1_tree())
    R = ResidualStore(S.layout.labels, rng.normal(size=(50, 9)) @ rng.normal(size=(9, 9)))
    assert np.array_equal(estimate("cov", S, R, shrinkage=1.0).sigma, estimate("hvar", S, R).sigma)
    sig = estimate("cov", S, R, shrinkage=0.0).sigma
    d = np.sqrt(np.diag(sig))
    corr = np.corrcoef(R.values, rowvar=False)
    assert np.max(np.abs(sig / np.outer(d, d) - corr)) <= 1e-12
    kcov = estimate("kcov", S, R).sigma
    assert np.all(kcov[level_mask(S.levels) == 0] == 0.0)
    empty = ResidualStore.empty(S.layout.labels)
    assert np.array_equal(estimate("str", S, empty).sigma, np.diag(structural_vector(S)))


def test_criterion_7_in_sample_improvement():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    tree = build_tree(
        [("t", "p"), ("t", "q"), ("p", "a"), ("p", "b"), ("p", "c"), ("q", "d"), ("q", "e")]
        + [("a", "l1"), ("a", "l2"), ("b", "l3"), ("c", "l4"), ("d", "l5"), ("d", "l6"), ("e", "l7"), ("e", "l8")]
    )
    S = summation_matrix(tree)
    assert S.m == 8
    trials = 2000
    diffs = np.empty(trials)
    for i in range(trials):
        sigma = random_spd(rng, S.n, cond=20.0)
        truth = aggregate(S, rng.normal(10, 3, size=8))
        base = truth + rng.multivariate_normal(np.zeros(S.n), sigma)
        rec = reconcile_gls(S, sigma, base)
        diffs[i] = np.mean((base - truth) ** 2) - np.mean((rec - truth) ** 2)
    test = stats.ttest_1samp(diffs, 0.0, alternative="greater")
    print(f"mean improvement {diffs.mean():.4f}, p={test.pvalue:.2e}, {time.perf_counter() - t0:.1f}s")
    assert test.pvalue < 0.01
    assert time.perf_counter() - t0 < 60


def test_criterion_8_gradient_checks():
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    S = summation_matrix(build_tree([("t", "a"), ("t", "b")]))
    X = rng.normal(size=(10, 4))
    Y = aggregate(S, np.abs(X[:, :2]) + 3.0)
    scaler = Scaler().fit(Y)
    Yz = scaler.transform(Y)
    sigma = random_spd(rng, 3)
    worst = {}

    cfg = NetConfig((4, 6, 1), ("sigmoid", "linear"), (0.0, 0.0))
    model = init_model(cfg)
    assert model.n_params <= 100
    _, gW, gb = backward(model, X, Yz[:, :1])
    nW, nb = numeric_gradients(model, lambda: loss_base(Yz[:, :1], forward(model, X)), eps=1e-5)
    worst["L_b"] = max_relative_error(gW + gb, nW + nb)

    cfg = NetConfig((4, 6, 3), ("sigmoid", "linear"), (0.2, 0.0))
    model = init_model(cfg)
    assert model.n_params <= 100
    cmap = CoherencyMap(S, sigma, scaler)
    for name, alpha in (("L_h", 1.0), ("L_c", 0.0), ("L_hc", 0.75)):
        _, gW, gb = backward(model, X, Yz, alpha, cmap, training=True, rng=np.random.default_rng(1))
        nW, nb = numeric_gradients(
            model, lambda: combined_loss(model, X, Yz, alpha, scaler, S, sigma, training=True, seed=1), eps=1e-5
        )
        worst[name] = max_relative_error(gW + gb, nW + nb)
    print({k: f"{v:.2e}" for k, v in worst.items()})
    assert all(v <= 1e-4 for v in worst.values())
    assert time.perf_counter() - t0 < 30


@pytest.fixture(scope="module")
def eight_leaf_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    frame = make_loads(n_series=8, n_groups=3, days=40, noise=0.3, seed=11)
    write_long(frame, root / "loads.csv")
    return root / "loads.csv"


def experiment_config(path, seed, **extra):
    text = f"""
[data]
path = {path}
[hierarchy]
mode = spatial
[windows]
n_batches = 3
test_size = 48
[learner]
alpha = 0.75
[experiment]
seed = {seed}
[output]
dir =
"""
    return load_config(text, extra)


def test_criterion_9_hierarchical_beats_multitask_on_coherency(eight_leaf_data):
    t0 = time.perf_counter()
    hier, multi, worst_rel = [], [], 0.0
    for seed in range(5):
        cfg = experiment_config(
            eight_leaf_data,
            seed,
            **{"experiment.forecasters": "multi-task,hierarchical", "experiment.reconcilers": "None,id,str,svar,hvar,cov,kcov"},
        )
        rep = run_experiment(cfg).report
        assert not rep.failed
        assert rep.header["m"] == 8
        hier.append(rep.cells[("hierarchical", "None")]["coherency_ms3e"])
        multi.append(rep.cells[("multi-task", "None")]["coherency_ms3e"])
        for (f, r), cell in rep.cells.items():
            if r != "None":
                worst_rel = max(worst_rel, cell["coherency_relative"])
    print(f"median coherency MS3E: hierarchical {np.median(hier):.4g}, multi-task {np.median(multi):.4g}; "
          f"worst reconciled relative {worst_rel:.1e}; {time.perf_counter() - t0:.0f}s")
    assert np.median(hier) < np.median(multi)
    assert worst_rel <= 1e-12
    assert time.perf_counter() - t0 < 600


def test_criterion_10_metric_identities():
    from fractions import Fraction

    assert relmse(2.5, 2.5) == 0.0
    kappa = structural_vector(summation_matrix(fig1_tree()))
    assert np.array_equal(ms3e(kappa, kappa), np.ones(9))
    e = np.array([Fraction(7, 3), Fraction(-1, 2), Fraction(9)], dtype=object)
    k = np.array([Fraction(7), Fraction(3, 4), Fraction(3)], dtype=object)
    assert list(scaled_errors(e, k)) == [Fraction(1, 3), Fraction(-2, 3), Fraction(3)]


def test_criterion_11_pipeline_reproducibility(eight_leaf_data, tmp_path):
    extra = {"learner.epochs": "20", "experiment.workers": "3"}
    first = run_experiment(experiment_config(eight_leaf_data, 3, **extra), out_dir=tmp_path / "a")
    run_experiment(experiment_config(eight_leaf_data, 3, **extra), out_dir=tmp_path / "b")
    for name in ("report.tsv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    prov = first.report.header["provenance"]
    n_batches = 3
    scaler_checks = [e for e in prov if e["what"].endswith("scaler")]
    sigma_checks = [e for e in prov if "reconciliation sigma" in e["what"]]
    assert len(scaler_checks) == 3 * n_batches
    assert len(sigma_checks) == 3 * 6 * n_batches
    assert all(e["read_end"] < e["consumer_start"] for e in prov)
