"""Estimators of the conditional c.d.f.

``check_cdf`` combines a plug-in Gaussian with the limit formula for the case
where the tested coefficient is zero, switching between them with an auxiliary
decision on whether the true order equals p. Batch versions evaluate whole
t-grids for every replication in a :class:`~postsel.regression.SampleBatch`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from ._special import bvn_cdf, gauss_cdf, qmc_normal
from .cond_dist import query_seed
from .regression import TargetMap, finite_quantities
from .selection import gts_select_batch

DECIDE_EQ = "p0 = p"
DECIDE_LT = "p0 < p"


def _A(A):
    return A.A if isinstance(A, TargetMap) else np.atleast_2d(np.asarray(A, dtype=float))


def default_threshold(n):
    """s_{n,p} = sqrt(log n): diverges, and is o(sqrt(n))."""
    return float(np.sqrt(np.log(n)))


def plugin_phi_batch(batch, A, p, ts):
    """Phi_hat_{n,p} at each t, per replication: (m, T) array."""
    A = _A(A)
    k = A.shape[0]
    ts = np.asarray(ts, dtype=float).reshape(-1, k)
    m = len(batch)
    if p == 0:
        return np.broadcast_to(np.all(ts >= 0, axis=1), (m, ts.shape[0])).astype(float)
    cov = finite_quantities(batch.design, A, p).cov
    sig = batch.sigma_hat
    if k == 1:
        v = np.sqrt(cov[0, 0])
        if v == 0:
            return np.broadcast_to(ts[:, 0] >= 0, (m, ts.shape[0])).astype(float)
        return ndtr(ts[None, :, 0] / (sig[:, None] * v))
    out = np.empty((m, ts.shape[0]))
    for i, s in enumerate(sig):
        for j, t in enumerate(ts):
            out[i, j] = gauss_cdf(s ** 2 * cov, t, seed=query_seed(0, t, s))[0]
    return out


def plugin_phi(sample, A, p, t):
    """Gaussian c.d.f. with covariance sigma_hat^2 A[p] (X[p]'X[p]/n)^-1 A[p]'; point mass at 0 for p = 0."""
    return float(plugin_phi_batch(sample.as_batch(), A, p, np.atleast_1d(t)[None, :])[0, 0])


def aux_decide_batch(batch, p, s_np=None, method="threshold"):
    """Boolean array, True where the auxiliary procedure decides p0(theta) = p."""
    n = batch.design.n
    if p < 1:
        raise ValueError("auxiliary decision needs p >= 1")
    if method == "threshold":
        s = default_threshold(n) if s_np is None else float(s_np)
        return np.abs(batch.t_stats[:, p]) > s
    if method == "bic":
        def bic(q):
            return n * np.log(batch.rss_nested(q) / n) + q * np.log(n)
        return bic(p) < bic(p - 1)
    raise ValueError(f"unknown auxiliary method {method!r}")


def aux_decide(sample, p, s_np=None, method="threshold"):
    ok = aux_decide_batch(sample.as_batch(), p, s_np, method)[0]
    return DECIDE_EQ if ok else DECIDE_LT


def _zero_coef_limit(sig, A, oq, c, ts, seed):
    """Limit formula with the tested coefficient at zero, plug-in version: (m, T)."""
    k = ts.shape[1]
    if k == 1:
        v = np.sqrt(oq.cov[0, 0])
        if v == 0:
            return np.broadcast_to(ts[:, 0] >= 0, (sig.size, ts.shape[0])).astype(float)
        x = ts[None, :, 0] / (sig[:, None] * v)
        rho = oq.corr
        num = ndtr(x) - (bvn_cdf(x, c, rho) - bvn_cdf(x, -c, rho))
        return np.clip(num / (2.0 * ndtr(-c)), 0.0, 1.0)
    # k >= 2: quasi-Monte Carlo over w-space restricted to |u| >= c, at unit sigma
    p = oq.p
    x = qmc_normal(p, 2 ** 14, seed).reshape(-1, p)
    z = x[np.abs(x[:, p - 1]) >= c] @ (A[:, :p] @ oq.F).T
    out = np.empty((sig.size, ts.shape[0]))
    for i, s in enumerate(sig):
        out[i] = np.all(s * z[None] <= ts[:, None, :], axis=-1).mean(axis=1)
    return out


def check_cdf_batch(batch, family, A, p, ts, *, s_np=None, method="threshold"):
    """G_check_n(t|p) at each t for every replication: (m, T) array."""
    A = _A(A)
    k = A.shape[0]
    ts = np.asarray(ts, dtype=float).reshape(-1, k)
    O = family.O
    if not O <= p <= family.P:
        raise ValueError("order must satisfy O <= p <= P")
    phi = plugin_phi_batch(batch, A, p, ts)
    if p == O:
        return phi
    eq = aux_decide_batch(batch, p, s_np, method)
    out = np.array(phi, copy=True)
    if np.all(eq):
        return out
    rows = ~eq
    oq = finite_quantities(batch.design, A, p)
    c = family.c(batch.design.n)[p]
    out[rows] = _zero_coef_limit(batch.sigma_hat[rows], A, oq, c, ts,
                                 seed=query_seed(0, batch.design.n, p, ts))
    return out


def check_cdf(sample, family, A, p, t, *, s_np=None, method="threshold"):
    return float(check_cdf_batch(sample.as_batch(), family, A, p, np.atleast_1d(t)[None, :],
                                 s_np=s_np, method=method)[0, 0])


def check_cdf_selected_batch(batch, family, A, ts, *, s_np=None, method="threshold",
                             p_hat=None):
    """G_check_n(t|p_hat), with p_hat selected per replication: (m, T) array."""
    A = _A(A)
    ts = np.asarray(ts, dtype=float).reshape(-1, A.shape[0])
    if p_hat is None:
        p_hat = gts_select_batch(batch, family)
    out = np.empty((len(batch), ts.shape[0]))
    for p in np.unique(p_hat):
        rows = p_hat == p
        out[rows] = check_cdf_batch(batch.subset(rows), family, A, int(p), ts,
                                    s_np=s_np, method=method)
    return out


def check_cdf_selected(sample, family, A, t, *, s_np=None, method="threshold"):
    return float(check_cdf_selected_batch(sample.as_batch(), family, A,
                                          np.atleast_1d(t)[None, :], s_np=s_np,
                                          method=method)[0, 0])
