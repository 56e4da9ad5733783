import io

import numpy as np
import pytest
from scipy import stats

from postsel.cond_dist import lemma_c1_bound
from postsel.errors import ConditioningError
from postsel.montecarlo import (LEDGER_SCHEMA, SUMMARY_SCHEMA, Estimate, ExperimentPlan,
                                ReplicationLedger, block_rng, decreasing_within_noise,
                                default_rho0, draw_batch, draw_sample, empirical_cond_cdf,
                                error_prob, gamma_grid, limit_class, q_star, rows_to_text,
                                run_ledger, simulate, thm45_reduction_run)
from postsel.regression import DesignMatrix, Sample
from postsel.selection import NestedFamily, ThresholdRule

Q3 = np.array([[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]])
A1 = np.array([[1.0, 0.0, 0.0]])
FAM = NestedFamily.constant(1, 3, 1.96)


# ---------------------------------------------------------------- sampling

def test_draw_sample_zero_mean():
    d = DesignMatrix.synthetic(8, np.eye(2), seed=0)
    rng = block_rng(1, 8, 0, 0)
    Y = np.array([draw_sample(d, np.zeros(2), 2.0, rng) for _ in range(100_000)])
    m = Y.mean(axis=0)
    assert np.all(np.abs(m) <= 3 * 2.0 / np.sqrt(100_000))


def test_draw_sample_covariance_on_small_design():
    d = DesignMatrix.synthetic(5, np.eye(2), seed=0)
    rng = block_rng(2, 5, 0, 0)
    sigma, m = 1.5, 100_000
    Y = np.array([draw_sample(d, np.array([1.0, -1.0]), sigma, rng) for _ in range(m)])
    S = np.cov(Y.T)
    # SE of a sample covariance entry under normality: sigma^2 sqrt((1 + delta_ij) / m)
    se = sigma ** 2 * np.sqrt((1 + np.eye(5)) / m)
    assert np.all(np.abs(S - sigma ** 2 * np.eye(5)) <= 3.5 * se)


def test_draw_sample_is_deterministic_and_rejects_bad_sigma():
    d = DesignMatrix.synthetic(10, np.eye(2), seed=0)
    a = draw_sample(d, [1.0, 2.0], 1.0, block_rng(5, 10, 0, 0))
    b = draw_sample(d, [1.0, 2.0], 1.0, block_rng(5, 10, 0, 0))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        draw_sample(d, [1.0, 2.0], 0.0, block_rng(5, 10, 0, 0))


def test_sufficient_statistic_sampler_matches_full_draws():
    """g = Qx'Y and RSS from full Y draws follow the same law as the direct sampler."""
    d = DesignMatrix.synthetic(12, Q3, seed=3)
    theta, sigma, m = np.array([0.5, -0.2, 0.1]), 1.3, 20_000
    rng = block_rng(9, 12, 0, 0)
    full = [Sample(d, draw_sample(d, theta, sigma, rng)) for _ in range(m)]
    g_full = np.array([s.g for s in full])
    rss_full = np.array([s.rss for s in full])
    b = draw_batch(d, theta, sigma, block_rng(10, 12, 0, 0), m)
    R = d.qr[1]
    for g in (g_full, b.g):
        assert np.all(np.abs(g.mean(axis=0) - R @ theta) <= 3.5 * sigma / np.sqrt(m))
        np.testing.assert_allclose(np.cov(g.T), sigma ** 2 * np.eye(3), atol=0.06)
    chi = stats.chi2(12 - 3).cdf
    assert stats.kstest(rss_full / sigma ** 2, chi).pvalue > 1e-3
    assert stats.kstest(b.rss / sigma ** 2, chi).pvalue > 1e-3
    assert stats.ks_2samp(g_full[:, 2], b.g[:, 2]).pvalue > 1e-3


def test_simulate_thread_count_independent():
    d = DesignMatrix.synthetic(50, Q3, seed=0)
    a = simulate(d, np.ones(3), 1.0, 12_345, master=3, block=1000, threads=1)
    b = simulate(d, np.ones(3), 1.0, 12_345, master=3, block=1000, threads=4)
    assert np.array_equal(a.g, b.g) and np.array_equal(a.rss, b.rss)
    assert len(a) == 12_345
    c = simulate(d, np.ones(3), 1.0, 12_345, master=4, block=1000)
    assert not np.array_equal(a.g, c.g)


def test_block_streams_are_distinct():
    x = block_rng(0, 10, 0, 0).standard_normal(5)
    assert not np.array_equal(x, block_rng(0, 10, 0, 1).standard_normal(5))
    assert not np.array_equal(x, block_rng(0, 11, 0, 0).standard_normal(5))
    assert not np.array_equal(x, block_rng(0, 10, 1, 0).standard_normal(5))


# ---------------------------------------------------------------- ledger

@pytest.fixture(scope="module")
def ledger():
    d = DesignMatrix.synthetic(60, Q3, seed=1)
    return run_ledger(d, np.array([1.0, 0.25, 0.15]), 1.0, FAM, A1, np.array([-1.0, 0.0, 1.0]),
                      5000, master=2)


def test_ledger_rows_and_partition(ledger):
    assert len(ledger) == 5000
    assert ledger.target.shape == (5000, 1)
    assert ledger.exact.shape == (5000, 3)
    assert ledger.estimators["check"].shape == (5000, 3)
    assert sum(np.sum(ledger.cell(p)) for p in (1, 2, 3)) == 5000


def test_ledger_csv(ledger):
    buf = io.StringIO()
    ledger.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("# " + LEDGER_SCHEMA)
    assert len(lines) == 5002


def test_ledger_thread_independent():
    d = DesignMatrix.synthetic(60, Q3, seed=1)
    args = (d, np.array([1.0, 0.25, 0.15]), 1.0, FAM, A1, np.array([0.0]), 4000)
    a = run_ledger(*args, master=3, block=500, threads=1)
    b = run_ledger(*args, master=3, block=500, threads=3)
    ba, bb = io.StringIO(), io.StringIO()
    a.to_csv(ba)
    b.to_csv(bb)
    assert ba.getvalue() == bb.getvalue()


def test_empirical_cdf_trivial_cases(ledger):
    e = empirical_cond_cdf(ledger, 2, [1e9])
    assert e.value == 1.0 and e.count == np.sum(ledger.cell(2))
    one = ReplicationLedger(60, 0, 0, 1, np.zeros(3), 1.0, np.zeros((1, 1)),
                            np.array([2]), np.zeros((1, 3)), np.array([[-0.5]]))
    e = empirical_cond_cdf(one, 2, [0.0])
    assert (e.value, e.count) == (1.0, 1)
    empty = empirical_cond_cdf(one, 3, [0.0])
    assert empty.empty and empty.count == 0 and np.isnan(empty.value)


def test_error_prob_trivial_deltas(ledger):
    assert error_prob(ledger, "check", 1.1).value == 0.0
    assert error_prob(ledger, "check", 0.0).value > 0.99
    e = error_prob(ledger, "check", 0.05, p=2)
    assert e.count == np.sum(ledger.cell(2))


def test_estimate_se():
    e = Estimate.of(np.array([True] * 30 + [False] * 70))
    assert e.value == 0.3 and e.count == 100
    assert e.se == pytest.approx(np.sqrt(0.3 * 0.7 / 100))


# ---------------------------------------------------------------- plans

def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(Q3, (100,), np.zeros(3), FAM, A1, [0.0], reps=999)
    with pytest.raises(ValueError):
        ExperimentPlan(Q3, (100,), np.zeros(2), FAM, A1, [0.0])


def test_q_star():
    assert q_star(Q3, A1, 1) == 3
    assert q_star(np.eye(3), A1, 1) is None
    Qb = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert q_star(Qb, A1, 1) == 2
    # banded Q whose inverse has a zero corner: the top order decouples from the first coordinate
    Qar = np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]])
    assert q_star(Qar, A1, 1) == 2


def test_gamma_grid_symmetric():
    G = gamma_grid(3, 3, default_rho0(Q3, 1.0), 9)
    assert G.shape == (9, 3)
    assert np.array_equal(G[:, 2], -G[::-1, 2])
    assert G[4, 2] == 0.0
    assert np.all(G[:, :2] == 0)
    assert np.max(np.abs(G)) < default_rho0(Q3, 1.0)


def test_limit_class():
    assert limit_class([1.0, 0.0, 0.0], 1, 1) == "at"
    assert limit_class([1.0, 0.0, 0.0], 3, 1) == "above"
    assert limit_class([0.0, 0.0, 0.0], 1, 1) == "at"
    with pytest.raises(ValueError):
        limit_class([1.0, 1.0, 0.0], 1, 1)


def test_decreasing_within_noise():
    assert decreasing_within_noise([0.5, 0.3, 0.31, 0.1], [0.01] * 4)
    assert not decreasing_within_noise([0.5, 0.3, 0.4, 0.1], [0.01] * 4)
    assert not decreasing_within_noise([0.1, 0.1], [0.0, 0.0])


def test_rows_to_text_header():
    txt = rows_to_text([dict(n=1, v=0.5)], meta="seed=3")
    assert txt.splitlines()[0] == f"# {SUMMARY_SCHEMA} seed=3"
    assert txt.splitlines()[1] == "n,v"


def test_threshold_rule_reduction_has_no_discrepancy():
    plan = ExperimentPlan(Q3, (200,), np.array([0.25, 0.25, 0.0]), FAM, A1,
                          np.linspace(-2, 2, 5), reps=5000, seed=1)
    rule = ThresholdRule((1, 1, 0), np.sqrt(2))
    rows = thm45_reduction_run(plan, rule, np.sqrt(2))
    assert rows[0]["symdiff_full"] == 0.0 and rows[0]["symdiff_star"] == 0.0


def test_reduction_preconditions():
    plan = ExperimentPlan(Q3, (200,), np.array([0.25, 0.0, 0.0]), FAM, A1, [0.0], reps=1000)
    with pytest.raises(ValueError):
        thm45_reduction_run(plan, ThresholdRule((1, 1, 0), 1.0), 1.0)


def test_empty_cells_raise_in_sweep():
    from postsel.montecarlo import nonuniformity_sweep

    fam = NestedFamily(1, (1.96, 1.96))
    plan = ExperimentPlan(Q3, (100,), np.array([1.0, 0.0, 0.0]), fam, A1, [1.0], reps=1000,
                          gamma_grid=np.zeros((1, 3)), delta=0.05, p=3)
    rows = nonuniformity_sweep(plan, conditional=True)
    assert rows[0]["count"] > 0
    assert rows[0]["bound"] == pytest.approx(lemma_c1_bound(fam, 3))
    tiny = ExperimentPlan(Q3, (100,), np.array([1.0, 0.0, 0.0]), NestedFamily(1, (1.96, 7.0)),
                          A1, [1.0], reps=1000, gamma_grid=np.zeros((1, 3)), delta=0.05, p=3)
    with pytest.raises(ConditioningError):
        nonuniformity_sweep(tiny, conditional=True)
