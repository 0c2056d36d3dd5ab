import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import trapezoid

from prorehearsal.metrics import (ErrorMatrix, MetricError, MetricRecord, bwt, forgetting_ratio,
                                  js_distance, nrmse, pearson_r, r_squared, read_records_csv,
                                  significance_stars, wilcoxon_signed_rank, write_records_csv)


def test_r_squared_hand_cases():
    y = np.array([1.0, 2.0, 3.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(3, y.mean())) == 0.0
    assert r_squared(y, [1, 2, 5]) == -1.0
    with pytest.raises(MetricError):
        r_squared([1, 1, 1], [1, 2, 3])
    with pytest.raises(MetricError):
        r_squared([1, 2], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=30), st.integers(0, 2 ** 32 - 1))
def test_r_squared_at_most_one(ys, seed):
    y = np.array(ys)
    if np.ptp(y) < 1e-6:
        return
    pred = y + np.random.default_rng(seed).normal(size=len(y))
    assert r_squared(y, pred) < 1.0
    assert r_squared(y, y) == 1.0


def test_nrmse_cases():
    assert nrmse([0, 1, 2], [0, 1, 2]) == 0.0
    assert nrmse([0, 1], [1, 0]) == 1.0
    rng = np.random.default_rng(0)
    y, p = rng.normal(size=50), rng.normal(size=50)
    assert nrmse(3.7 * y, 3.7 * p) == pytest.approx(nrmse(y, p), rel=1e-12)
    with pytest.raises(MetricError):
        nrmse([2, 2], [1, 2])


def _matrix(values):
    m = ErrorMatrix([f"t{i}" for i in range(1, 4)])
    for (i, j), v in values.items():
        m.set(i, j, v)
    return m


def test_bwt_and_fr():
    m = _matrix({(1, 1): 0.05, (2, 1): 0.15, (2, 2): 0.1})
    assert bwt(m, 2) == pytest.approx(-0.10)
    m = _matrix({(1, 1): 0.1, (2, 1): 0.1, (2, 2): 0.2, (3, 1): 0.2, (3, 2): 0.2, (3, 3): 0.3})
    assert bwt(m, 2) == 0.0
    assert forgetting_ratio(m, 1) == pytest.approx(1.0)
    assert forgetting_ratio(m, 2) == 0.0
    with pytest.raises(MetricError):
        bwt(_matrix({(1, 1): 0.1}), 2)
    with pytest.raises(MetricError):
        forgetting_ratio(_matrix({(1, 1): 0.0, (3, 1): 0.1}), 1)
    with pytest.raises(MetricError):
        bwt(m, 1)


def test_error_matrix_round_trip_is_exact():
    rng = np.random.default_rng(1)
    m = ErrorMatrix(["a", "b", "c"])
    for i in range(1, 4):
        for j in range(1, i + 1):
            m.set(i, j, float(rng.uniform(0.01, 1)))
    back = ErrorMatrix.from_dict(m.to_dict())
    assert bwt(back, 3) == bwt(m, 3)
    assert forgetting_ratio(back, 1) == forgetting_ratio(m, 1)
    assert m.is_complete()
    with pytest.raises(MetricError):
        m.set(1, 2, 0.1)


def test_js_identical_and_disjoint():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(500, 3))
    assert js_distance(a, a) == 0.0
    assert js_distance(np.zeros((20, 1)) + rng.uniform(0, 1, (20, 1)),
                       np.zeros((20, 1)) + rng.uniform(5, 6, (20, 1))) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(MetricError):
        js_distance(a[:5], a)


def _js_integral(mu_gap):
    x = np.linspace(-12, 12 + mu_gap, 200_001)
    p = stats.norm.pdf(x)
    q = stats.norm.pdf(x, loc=mu_gap)
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = np.where(p > 0, p * np.log2(p / m), 0.0)
        kq = np.where(q > 0, q * np.log2(q / m), 0.0)
    return np.sqrt(0.5 * trapezoid(kp, x) + 0.5 * trapezoid(kq, x))


def test_js_gaussians_match_numerical_integral():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(50_000, 1))
    b = rng.normal(loc=3.0, size=(50_000, 1))
    assert abs(js_distance(a, b) - _js_integral(3.0)) < 0.02


def test_js_metric_properties():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b, c = (rng.normal(loc=rng.uniform(-2, 2), scale=rng.uniform(0.5, 2), size=(400, 2))
                   for _ in range(3))
        ab, ba = js_distance(a, b), js_distance(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0 <= ab <= 1
        assert ab <= js_distance(a, c) + js_distance(c, b) + 1e-9


def test_wilcoxon_all_positive_exact():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], alternative="greater")
    assert res.statistic == 0 and res.exact
    assert res.pvalue == pytest.approx(1 / 64)
    # exhaustive enumeration oracle
    count = sum(1 for s in itertools.product([0, 1], repeat=6)
                if sum(r for r, b in zip(range(1, 7), s) if b) >= 21)
    assert count / 64 == pytest.approx(res.pvalue)


def test_wilcoxon_symmetric_pairs():
    res = wilcoxon_signed_rank([1, -1, 2, -2, 3, -3, 4, -4])
    assert res.w_plus == res.w_minus
    assert res.pvalue == pytest.approx(1.0)


def test_wilcoxon_rank_invariance_and_errors():
    d = np.array([0.3, -0.1, 0.7, 1.2, -0.4, 2.0, 0.05])
    a = wilcoxon_signed_rank(d)
    b = wilcoxon_signed_rank(5 * d)
    c = wilcoxon_signed_rank(np.sign(d) * np.abs(d) ** 3)
    assert a.statistic == b.statistic == c.statistic
    with pytest.raises(MetricError):
        wilcoxon_signed_rank([0, 0, 0, 0, 0])
    with pytest.raises(MetricError):
        wilcoxon_signed_rank([1, 2, 0, 0])


@pytest.mark.parametrize("n", [6, 9, 12])
def test_wilcoxon_exact_matches_scipy(n):
    rng = np.random.default_rng(n)
    for _ in range(10):
        d = rng.normal(0.3, 1, size=n)
        ours = wilcoxon_signed_rank(d)
        ref = stats.wilcoxon(d, method="exact")
        assert ours.statistic == ref.statistic
        assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-9)


def test_wilcoxon_normal_approximation_matches_scipy():
    rng = np.random.default_rng(5)
    for _ in range(10):
        d = np.round(rng.normal(0.2, 1, size=30), 1)  # rounding creates ties
        d = d[d != 0]
        ours = wilcoxon_signed_rank(d)
        ref = stats.wilcoxon(d, method="approx", correction=True)
        assert not ours.exact
        assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-6)


def test_stars_and_pearson():
    assert significance_stars(5e-3) == "**"
    assert significance_stars(5e-4) == "***"
    assert significance_stars(5e-5) == "****"
    assert significance_stars(0.2) == "ns"
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=40), rng.normal(size=40)
    assert pearson_r(x, y) == pytest.approx(stats.pearsonr(x, y)[0], rel=1e-12)


def test_records_csv_round_trip(tmp_path):
    recs = [MetricRecord("r1", "er", "LW", "r2", 0.1 + 0.2, 0),
            MetricRecord("r1", "er", "all", "bwt", -1e-17, 3)]
    write_records_csv(recs, tmp_path / "m.csv")
    assert read_records_csv(tmp_path / "m.csv") == recs
    with pytest.raises(MetricError):
        MetricRecord("r", "s", "t", "m", float("nan"), 0)
