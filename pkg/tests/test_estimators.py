import numpy as np
import pytest
from scipy import integrate as spi
from scipy import stats

from postsel.estimators import (DECIDE_EQ, DECIDE_LT, aux_decide, aux_decide_batch,
                                check_cdf, check_cdf_batch, check_cdf_selected,
                                check_cdf_selected_batch, default_threshold, plugin_phi,
                                plugin_phi_batch)
from postsel.montecarlo import simulate
from postsel.regression import DesignMatrix, Sample, finite_quantities
from postsel.selection import NestedFamily, gts_select

Q3 = np.array([[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]])
A1 = np.array([[1.0, 0.0, 0.0]])
FAM = NestedFamily.constant(1, 3, 1.96)


@pytest.fixture
def design():
    return DesignMatrix.synthetic(80, Q3, seed=5)


@pytest.fixture
def sample(design):
    rng = np.random.default_rng(9)
    return Sample(design, design.X @ np.array([1.0, 0.3, 0.0]) + rng.standard_normal(80))


def test_default_threshold_rate():
    assert default_threshold(100) == pytest.approx(np.sqrt(np.log(100)))
    assert default_threshold(10 ** 6) / np.sqrt(10 ** 6) < 0.01


def test_plugin_phi_point_mass_and_center(sample):
    assert plugin_phi(sample, A1, 0, [0.0]) == 1.0
    assert plugin_phi(sample, A1, 0, [-1e-9]) == 0.0
    assert plugin_phi(sample, A1, 2, [0.0]) == 0.5


def test_plugin_phi_against_normal_cdf(sample, design):
    X, y = design.X, sample.y
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    s = np.sqrt(np.sum((y - X @ beta) ** 2) / (80 - 3))
    for p in (1, 2, 3):
        var = s ** 2 * np.linalg.inv(X[:, :p].T @ X[:, :p] / 80)[0, 0]
        for t in (-1.3, 0.4, 2.2):
            assert plugin_phi(sample, A1, p, [t]) == pytest.approx(
                stats.norm.cdf(t / np.sqrt(var)), abs=1e-12)


def test_plugin_phi_vector_target(sample, design):
    A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    s = sample.as_batch().sigma_hat[0]
    cov = s ** 2 * finite_quantities(design, A, 3).cov
    t = np.array([0.3, -0.4])
    ref = stats.multivariate_normal(cov=cov).cdf(t)
    assert plugin_phi(sample, A, 3, t) == pytest.approx(ref, abs=2e-4)


def test_aux_decision(design):
    y = np.random.default_rng(1).standard_normal(80)
    s = Sample(design, y)
    # force T_2 = 0 by removing the part of y along the residual of column 2 on column 1
    X = design.X
    r = X[:, 1] - X[:, 0] * (X[:, 0] @ X[:, 1]) / (X[:, 0] @ X[:, 0])
    s0 = Sample(design, y - (r @ y) / (r @ r) * r)
    assert aux_decide(s0, 2) == DECIDE_LT
    big = Sample(design, y + 10 * X[:, 1])
    assert aux_decide(big, 2) == DECIDE_EQ
    assert aux_decide(s, 2, method="bic") in (DECIDE_EQ, DECIDE_LT)
    with pytest.raises(ValueError):
        aux_decide(s, 0)
    with pytest.raises(ValueError):
        aux_decide(s, 2, method="coin")


@pytest.mark.parametrize("method", ["threshold", "bic"])
def test_aux_decision_is_consistent(method):
    theta = np.array([1.0, 0.3, 0.0])
    prev_eq, prev_lt = 0.0, 0.0
    for n in (100, 1600, 25_600):
        d = DesignMatrix.synthetic(n, Q3, seed=1)
        b = simulate(d, theta, 1.0, 20_000, master=3)
        eq = np.mean(aux_decide_batch(b, 2, method=method))
        lt = np.mean(~aux_decide_batch(b, 3, method=method))
        assert eq >= prev_eq - 0.01 and lt >= prev_lt - 0.01
        prev_eq, prev_lt = eq, lt
    assert prev_eq > 0.99 and prev_lt > 0.95


def test_check_cdf_branches(sample):
    # p = O is the plug-in
    for t in (-1.0, 0.5):
        assert check_cdf(sample, FAM, A1, 1, [t]) == plugin_phi(sample, A1, 1, [t])
    # threshold at 0 always decides p0 = p, so the plug-in is returned
    for t in (-1.0, 0.5):
        assert check_cdf(sample, FAM, A1, 3, [t], s_np=0.0) == plugin_phi(sample, A1, 3, [t])


def test_check_cdf_zero_coefficient_branch(sample, design):
    # threshold huge: always the zero-coefficient formula, compared with quadrature of its definition
    p, c = 3, 1.96
    oq = finite_quantities(design, A1, p)
    s = sample.as_batch().sigma_hat[0]
    rho = oq.corr
    for t in (-0.8, 0.0, 1.1):
        x = t / (s * np.sqrt(oq.cov[0, 0]))
        f = lambda u: stats.norm.pdf(u) * stats.norm.cdf((x - rho * u) / np.sqrt(1 - rho ** 2))
        num = spi.quad(f, c, np.inf)[0] + spi.quad(f, -np.inf, -c)[0]
        ref = num / (2 * stats.norm.sf(c))
        assert check_cdf(sample, FAM, A1, p, [t], s_np=1e9) == pytest.approx(ref, abs=1e-9)


def test_check_cdf_is_a_cdf(design):
    b = simulate(design, np.array([1.0, 0.1, 0.0]), 1.0, 200, master=4)
    ts = np.linspace(-5, 5, 41)
    for p in (1, 2, 3):
        v = check_cdf_batch(b, FAM, A1, p, ts)
        assert np.all((v >= 0) & (v <= 1))
        assert np.all(np.diff(v, axis=1) >= -1e-12)


def test_check_cdf_vector_target_zero_branch(design):
    A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    b = simulate(design, np.array([1.0, 0.3, 0.0]), 1.0, 3, master=5)
    ts = np.array([[0.0, 0.0], [1.0, 1.0], [50.0, 50.0]])
    v = check_cdf_batch(b, FAM, A, 3, ts, s_np=1e9)
    assert v.shape == (3, 3)
    np.testing.assert_allclose(v[:, -1], 1.0)
    assert np.all(v[:, 0] <= v[:, 1])


def test_selected_estimator_matches_per_order(design):
    b = simulate(design, np.array([1.0, 0.3, 0.0]), 1.0, 500, master=6)
    ts = np.array([-0.5, 0.5])
    sel = check_cdf_selected_batch(b, FAM, A1, ts)
    from postsel.selection import gts_select_batch
    p_hat = gts_select_batch(b, FAM)
    for p in np.unique(p_hat):
        rows = p_hat == p
        np.testing.assert_array_equal(sel[rows], check_cdf_batch(b.subset(rows), FAM, A1, p, ts))


def test_selected_estimator_single_sample(sample):
    p = gts_select(sample, FAM)
    assert check_cdf_selected(sample, FAM, A1, [0.2]) == check_cdf(sample, FAM, A1, p, [0.2])
    if p == 1:
        assert check_cdf_selected(sample, FAM, A1, [0.2]) == plugin_phi(sample, A1, 1, [0.2])


def test_plugin_batch_shape(design):
    b = simulate(design, np.zeros(3), 1.0, 10, master=1)
    out = plugin_phi_batch(b, A1, 2, np.array([-1.0, 0.0, 1.0]))
    assert out.shape == (10, 3)
    np.testing.assert_allclose(out[:, 1], 0.5)
