from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlpmem.analysis import (
    distribution_stats,
    entropy,
    exponent_improvement,
    fit_power_law,
    fit_scaling_table,
)
from mlpmem.knn import SparseDistribution


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-9, 1e-3), st.floats(-0.5, -0.02))
def test_recovers_noiseless_power_law(beta, gamma):
    xs = np.logspace(6, 9, 7)
    fit = fit_power_law([(x, (beta * x) ** gamma) for x in xs])
    assert abs(fit.gamma - gamma) < 1e-9
    assert abs(fit.beta - beta) / beta < 1e-9
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_fit_predict_and_errors():
    fit = fit_power_law([(1e6, 30.0), (1e7, 20.0)])
    assert fit.predict(1e6) == pytest.approx(30.0)
    with pytest.raises(ValueError):
        fit_power_law([(1.0, 2.0)])
    with pytest.raises(ValueError):
        fit_power_law([(1.0, 2.0), (1.0, 3.0)])
    with pytest.raises(ValueError):
        fit_power_law([(1.0, 2.0), (-1.0, 3.0)])
    with pytest.raises(ValueError):
        fit_power_law([(1.0, 2.0), (2.0, 2.0)])


@pytest.mark.parametrize("g1,g2,expected", [(-0.143, -0.168, 0.175), (-0.216, -0.268, 0.241)])
def test_exponent_improvement_reported_values(g1, g2, expected):
    assert abs(exponent_improvement(g1, g2) - expected) < 0.003


def test_exponent_improvement_sign_check():
    with pytest.raises(ValueError):
        exponent_improvement(-0.1, 0.1)
    with pytest.raises(ValueError):
        exponent_improvement(0.0, -0.1)


def test_uniform_and_one_hot_stats():
    v = 100
    uni = distribution_stats([np.full(v, 1 / v)] * 3)
    assert uni.nonzero_counts[0.0] == v and uni.nonzero_counts[1e-2] == 0
    assert uni.cumulative_counts[0.8] == 80 and uni.cumulative_counts[0.99] == 99
    hot = distribution_stats([SparseDistribution(np.array([7]), np.array([1.0]), v)])
    assert hot.nonzero_counts[0.0] == 1 and all(c == 1 for c in hot.cumulative_counts.values())
    a, b = hot.rows("knn")
    assert a["type"] == "knn" and a[">0"] == 1 and b["sum>0.8"] == 1


def test_stats_threshold_is_strict():
    p = np.array([0.5, 0.1, 0.1, 0.3])
    s = distribution_stats([p], thresholds=[0.1], mass_levels=[0.8])
    assert s.nonzero_counts[0.1] == 2 and s.cumulative_counts[0.8] == 2


def test_entropy():
    assert entropy(np.full(8, 1 / 8)) == pytest.approx(np.log(8))
    assert entropy(np.array([1.0, 0.0])) == 0.0


def test_scaling_table_fits_each_system():
    rows = []
    for n in (1e5, 1e6, 1e7):
        rows.append({"system": "lm", "params": n, "ppl": (1e-3 * n) ** -0.1})
        rows.append({"system": "mlp", "params": n, "ppl": (1e-3 * n) ** -0.12})
    out = {r["system"]: r for r in fit_scaling_table(rows, ["params"])}
    assert out["lm"]["gamma"] == pytest.approx(-0.1) and out["lm"]["improvement_vs_lm"] == ""
    assert out["mlp"]["improvement_vs_lm"] == pytest.approx(0.2)
