import itertools

import numpy as np
import pytest
from scipy import stats

from postsel.errors import DegenerateResidualError
from postsel.montecarlo import block_rng, draw_sample, simulate
from postsel.regression import DesignMatrix, Sample, restricted_ls, subset_ls
from postsel.selection import (NestedFamily, SubsetFamily, ThresholdRule, _cascade,
                               condition24_probe, full_model_t, full_model_t_batch, gts_outcome,
                               gts_select, gts_select_batch, ic_score, ic_select,
                               ic_select_batch, pmse, t_stat)

Q3 = np.array([[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]])


def brute_cascade(T, c, O):
    P = len(T) - 1
    return max(p for p in range(O, P + 1) if p == O or abs(T[p]) >= c[p])


# ---------------------------------------------------------------- families

def test_nested_family_critical_values():
    f = NestedFamily.constant(1, 3, 1.96)
    c = f.c()
    assert f.P == 3
    assert np.isnan(c[0]) and c[1] == 0.0
    np.testing.assert_array_equal(c[2:], [1.96, 1.96])
    with pytest.raises(ValueError):
        NestedFamily(0, (1.0, -1.0))
    with pytest.raises(ValueError):
        NestedFamily(2, ())


def test_nested_family_schedule():
    f = NestedFamily(0, (2.0,), schedule=lambda n: [2.0 + 1.0 / n])
    assert f.c(10)[1] == pytest.approx(2.1)
    assert f.c()[1] == 2.0


def test_subset_family_validation_and_order():
    f = SubsetFamily.all_subsets(3)
    assert len(f.masks) == 8
    assert f.masks[0] == (0, 0, 0) and f.masks[-1] == (1, 1, 1)
    sizes = [sum(m) for m in f.masks]
    assert sizes == sorted(sizes)
    with pytest.raises(ValueError):
        SubsetFamily(((1, 1, 0), (1, 0, 1)))
    with pytest.raises(ValueError):
        SubsetFamily(((1, 1, 1),))
    with pytest.raises(ValueError):
        ThresholdRule((1, 0, 0), 1.0)


# ---------------------------------------------------------------- t statistics

def test_t_stat_conventions():
    d = DesignMatrix.synthetic(20, Q3, seed=0)
    rng = np.random.default_rng(1)
    y = rng.standard_normal(20)
    s = Sample(d, y)
    assert t_stat(s, 0) == 0.0
    # a Y orthogonal to column 3 after partialling out 1..2 has theta_3(3) = 0
    X = d.X
    H = X[:, :2] @ np.linalg.pinv(X[:, :2])
    r3 = X[:, 2] - H @ X[:, 2]
    y0 = y - (r3 @ y) / (r3 @ r3) * r3
    assert abs(t_stat(Sample(d, y0), 3)) < 1e-10


def test_cascade_examples():
    c = np.array([0.0, 1.96, 1.96])
    assert brute_cascade([0.0, 2.5, 1.0], c, 0) == 1
    assert _cascade(np.array([0.0, 2.5, 1.0]), c, 0) == 1
    assert _cascade(np.array([0.0, 0.1, 1.0]), c, 0) == 0
    assert _cascade(np.array([0.0, 0.1, 3.0]), c, 0) == 2


def test_cascade_matches_brute_force():
    rng = np.random.default_rng(3)
    for O in (0, 1, 2):
        c = np.full(5, 1.5)
        c[:O] = np.nan
        c[O] = 0.0
        T = 2.5 * rng.standard_normal((500, 5))
        T[:, 0] = 0.0
        got = _cascade(T, c, O)
        ref = [brute_cascade(t, c, O) for t in T]
        np.testing.assert_array_equal(got, ref)


def test_batch_selection_matches_per_sample():
    d = DesignMatrix.synthetic(30, Q3, seed=2)
    fam = NestedFamily.constant(1, 3, 1.0)
    theta = np.array([1.0, 0.3, 0.2])
    rng = block_rng(7, 30, 0, 0)
    ys = [draw_sample(d, theta, 1.0, rng) for _ in range(50)]
    samples = [Sample(d, y) for y in ys]
    from postsel.regression import SampleBatch
    batch = SampleBatch(d, np.array([s.g for s in samples]), np.array([s.rss for s in samples]))
    np.testing.assert_array_equal(gts_select_batch(batch, fam),
                                  [gts_select(s, fam) for s in samples])
    out = gts_outcome(samples[0], fam)
    assert out.kind == "nested" and out.stats.shape == (4,)


def test_null_t_statistic_is_student_t():
    n, P = 30, 3
    d = DesignMatrix.synthetic(n, Q3, seed=4)
    b = simulate(d, np.array([1.0, 0.5, 0.0]), 1.0, 100_000, master=5)
    ks = stats.kstest(b.t_stats[:, 3], stats.t(df=n - P).cdf).statistic
    assert ks < 0.01


def test_selection_frequency_at_zero_theta():
    d = DesignMatrix.synthetic(400, Q3, seed=6)
    fam = NestedFamily.constant(1, 3, 1.96)
    b = simulate(d, np.zeros(3), 1.0, 100_000, master=8)
    freq = np.mean(gts_select_batch(b, fam) == 3)
    # p_hat = P exactly when |T_P| >= c_P, and T_P ~ t(n - P) at theta = 0
    exact = 2 * stats.t.sf(1.96, 400 - 3)
    se = np.sqrt(exact * (1 - exact) / 100_000)
    assert abs(freq - exact) < 3 * se
    assert abs(freq - 2 * stats.norm.sf(1.96)) < 3 * se + abs(exact - 2 * stats.norm.sf(1.96))


def test_scale_equivariance():
    d = DesignMatrix.synthetic(25, Q3, seed=1)
    fam = NestedFamily.constant(0, 3, 1.5)
    rng = np.random.default_rng(2)
    for _ in range(20):
        y = d.X @ np.array([0.3, -0.2, 0.1]) + rng.standard_normal(25)
        assert gts_select(Sample(d, y), fam) == gts_select(Sample(d, 7.5 * y), fam)


# ---------------------------------------------------------------- information criteria

def test_ic_score_hand_computed():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0], [1.0, 4.0], [1.0, 5.0]])
    y = np.array([1.0, 2.0, 2.5, 4.5, 4.0, 6.5])
    s = Sample(DesignMatrix(X), y)
    n = 6
    # column 1 only: fit the mean
    rss1 = np.sum((y - y.mean()) ** 2)
    # column 2 only: regression through the origin on x
    x = X[:, 1]
    rss2 = np.sum((y - (x @ y) / (x @ x) * x) ** 2)
    assert ic_score(s, (1, 0), 2.0) == pytest.approx(np.log(rss1) + 2.0 / n, abs=1e-12)
    assert ic_score(s, (0, 1), 2.0) == pytest.approx(np.log(rss2) + 2.0 / n, abs=1e-12)


def test_ic_full_model_has_smallest_rss():
    d = DesignMatrix.synthetic(20, Q3, seed=3)
    y = np.random.default_rng(4).standard_normal(20)
    s = Sample(d, y)
    full = ic_score(s, (1, 1, 1), 0.0)
    for r in itertools.product([0, 1], repeat=3):
        assert full <= ic_score(s, r, 0.0) + 1e-12


def test_ic_select_matches_enumeration_and_tie_break():
    d = DesignMatrix.synthetic(20, Q3, seed=5)
    fam = SubsetFamily.all_subsets(3)
    rng = np.random.default_rng(6)
    for _ in range(20):
        y = d.X @ np.array([0.5, 0.0, 0.3]) + rng.standard_normal(20)
        s = Sample(d, y)
        scores = {r: ic_score(s, r, 2.0) for r in fam.masks}
        best = min(scores.values())
        ref = min((r for r in scores if scores[r] == best), key=lambda r: (sum(r), r))
        assert ic_select(s, fam) == ref


def test_ic_equal_fit_prefers_smaller_model():
    # Y orthogonal to column 3 and to the residual of column 3 on 1..2 gives RSS(r*) = RSS(full)
    d = DesignMatrix.synthetic(12, np.eye(3), seed=0)
    X = d.X
    y = X[:, 0] + X[:, 1] + np.random.default_rng(0).standard_normal(12)
    r3 = X[:, 2]
    y = y - (r3 @ y) / (r3 @ r3) * r3
    fam = SubsetFamily(((1, 1, 0), (1, 1, 1)), upsilon=2.0)
    assert ic_select(Sample(d, y), fam) == (1, 1, 0)


def test_singleton_like_family():
    d = DesignMatrix.synthetic(15, np.eye(2), seed=0)
    fam = SubsetFamily(((1, 1), (1, 0)))
    y = d.X @ np.array([5.0, 5.0]) + np.random.default_rng(0).standard_normal(15)
    assert ic_select(Sample(d, y), fam) == (1, 1)


def test_ic_degenerate_rss():
    d = DesignMatrix.synthetic(6, np.eye(2), seed=0)
    s = Sample(d, d.X @ np.array([1.0, 1.0]))
    with pytest.raises(DegenerateResidualError):
        ic_score(s, (1, 1), 2.0)


def test_ic_batch_matches_per_sample():
    d = DesignMatrix.synthetic(40, Q3, seed=7)
    fam = SubsetFamily.all_subsets(3)
    rng = np.random.default_rng(8)
    samples = [Sample(d, d.X @ np.array([0.3, 0.3, 0.0]) + rng.standard_normal(40))
               for _ in range(40)]
    from postsel.regression import SampleBatch
    batch = SampleBatch(d, np.array([s.g for s in samples]), np.array([s.rss for s in samples]))
    idx = ic_select_batch(batch, fam)
    assert [fam.masks[i] for i in idx] == [ic_select(s, fam) for s in samples]


# ---------------------------------------------------------------- estimators and full-model t

def test_pmse_is_restricted_fit_at_selection():
    d = DesignMatrix.synthetic(30, Q3, seed=9)
    fam = NestedFamily.constant(0, 3, 1.96)
    aic = SubsetFamily.all_subsets(3)
    rng = np.random.default_rng(10)
    for _ in range(10):
        s = Sample(d, d.X @ np.array([0.4, 0.0, 0.0]) + rng.standard_normal(30))
        est, out = pmse(s, fam)
        np.testing.assert_allclose(est, restricted_ls(s, out.order))
        if out.order == 0:
            assert np.all(est == 0)
        est, out = pmse(s, aic)
        np.testing.assert_allclose(est, subset_ls(s, out.mask))


def test_full_model_t():
    d = DesignMatrix.synthetic(25, Q3, seed=11)
    s = Sample(d, np.random.default_rng(12).standard_normal(25))
    assert full_model_t(s, 3) == pytest.approx(t_stat(s, 3), rel=1e-12)
    X, y = d.X, s.y
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    s2 = np.sum((y - X @ beta) ** 2) / 22
    for i in (1, 2):
        se = np.sqrt(s2 * np.linalg.inv(X.T @ X)[i - 1, i - 1])
        assert full_model_t(s, i) == pytest.approx(beta[i - 1] / se, rel=1e-10)
    # orthogonal design: sqrt(n)(X'Y/n)_i / sigma_hat
    do = DesignMatrix.orthogonal(25, 3, seed=1)
    so = Sample(do, np.random.default_rng(13).standard_normal(25))
    b = so.as_batch()
    ref = np.sqrt(25) * (do.X.T @ so.y / 25)[1] / b.sigma_hat[0]
    assert full_model_t(so, 2) == pytest.approx(ref, rel=1e-10)


def test_threshold_rule_has_zero_symmetric_differences():
    d = DesignMatrix.synthetic(200, Q3, seed=14)
    rule = ThresholdRule((1, 1, 0), np.sqrt(2))
    b = simulate(d, np.array([0.25, 0.25, 0.0]), 1.0, 20_000, master=1)
    (f1, s1), (f2, s2) = condition24_probe(b, rule, (1, 1, 0), np.sqrt(2))
    assert f1 == 0.0 and f2 == 0.0 and s1 == 0.0 and s2 == 0.0
    assert np.array_equal(ic_select_batch(b, rule) == 1,
                          np.abs(full_model_t_batch(b, 3)) >= np.sqrt(2))


def test_condition24_wrong_cutoff_stays_away_from_zero():
    d = DesignMatrix.synthetic(6400, Q3, seed=15)
    fam = SubsetFamily.all_subsets(3)
    b = simulate(d, np.array([0.25, 0.25, 0.0]), 1.0, 20_000, master=2)
    (f1, _), (f2, _) = condition24_probe(b, fam, (1, 1, 0), 3.0)
    # P(sqrt2 <= |N| < 3) ~ 0.155
    assert f1 > 0.1 and f2 > 0.1


def test_selection_outcomes_partition():
    d = DesignMatrix.synthetic(50, Q3, seed=16)
    fam = NestedFamily.constant(1, 3, 1.96)
    b = simulate(d, np.array([1.0, 0.2, 0.1]), 1.0, 5000, master=3)
    sel = gts_select_batch(b, fam)
    counts = [np.sum(sel == p) for p in range(1, 4)]
    assert sum(counts) == 5000
    assert set(np.unique(sel)) <= {1, 2, 3}
