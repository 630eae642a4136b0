from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fig1_tree
from hierlearn.hierarchy import aggregate, bottom_extractor, structural_vector, summation_matrix
from hierlearn.metrics import (
    EvaluationReport,
    MetricError,
    coherency_ms3e,
    level_mse,
    ms3e,
    mse,
    node_mse,
    relmse,
    scaled_errors,
)


@pytest.fixture
def S():
    return summation_matrix(fig1_tree())


def test_relmse_of_self_is_zero():
    assert relmse(3.7, 3.7) == 0.0
    assert relmse(1.0, 2.0) == -0.5
    with pytest.raises(MetricError):
        relmse(1.0, 0.0)


def test_ms3e_of_kappa_is_one(S):
    kappa = structural_vector(S)
    assert np.array_equal(ms3e(np.tile(kappa, (5, 1)), kappa), np.ones(9))


def test_scaled_errors_exact_on_rationals():
    e = np.array([Fraction(1, 3), Fraction(-5, 7), Fraction(2)], dtype=object)
    k = np.array([Fraction(3), Fraction(5, 2), Fraction(4)], dtype=object)
    out = scaled_errors(e, k)
    assert list(out) == [Fraction(1, 9), Fraction(-2, 7), Fraction(1, 2)]


def test_scaled_errors_rejects_bad_kappa():
    with pytest.raises(MetricError, match="positive"):
        scaled_errors([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(MetricError, match="length"):
        scaled_errors([1.0, 2.0], [1.0])


def test_level_mse(S):
    Y = np.zeros((2, 9))
    Yhat = np.arange(18, dtype=float).reshape(2, 9)
    lv = level_mse(Y, Yhat, S.levels)
    per = node_mse(Y, Yhat)
    assert lv[1] == per[0] and lv[2] == pytest.approx(per[1:3].mean())
    assert lv[3] == pytest.approx(per[3:].mean())
    assert mse(Y, Yhat) == pytest.approx(per.mean())


def test_shape_mismatch():
    with pytest.raises(MetricError, match="shape"):
        mse([1, 2], [1, 2, 3])
    with pytest.raises(MetricError, match="empty"):
        mse([], [])


def test_coherency_ms3e(S):
    G = bottom_extractor(S)
    y = aggregate(S, np.arange(6.0))
    assert coherency_ms3e(y, S, G) == 0.0
    y[0] += 6.0
    # one residual of 6 at the root, scaled by 6, averaged over 9 nodes
    assert coherency_ms3e(y, S, G) == pytest.approx(1 / 9)


def test_report_outputs():
    rep = EvaluationReport()
    rep.add("base", "None", hierarchical_ms3e=1.5, coherency_ms3e=0.2, level_mse={1: 2.0}, relmse={1: 0.0})
    rep.add("base", "hvar", error="CovarianceError: boom")
    assert rep.failed == [("base", "hvar")]
    table = rep.table()
    assert "base\tNone\thierarchical_ms3e\tall\t1.5\tkWh^2" in table
    assert "base\thvar\terror" in table
    doc = rep.to_dict()
    assert doc["cells"]["base"]["None"]["level_mse"] == {"1": 2.0}
    assert rep.to_json() == rep.to_json()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=9, max_size=9), st.floats(0.1, 10))
def test_ms3e_scales_quadratically(errs, c):
    kappa = structural_vector(summation_matrix(fig1_tree()))
    e = np.array(errs)
    assert np.allclose(ms3e(c * e, kappa), c**2 * ms3e(e, kappa))
    assert np.all(ms3e(e, kappa) <= e**2 + 1e-9)
