"""Finite-sample conditional distribution of the post-selection target and its
large-sample limits.

The target is Z = sqrt(n) A (theta_tilde(p) - theta) given {p_hat = p}.
Working with g = Qx'Y (see :mod:`postsel.regression`), the tested coefficients
satisfy T_q = g_q / sigma_hat with g ~ N(R theta, sigma^2 I) independent of
sigma_hat, so conditionally on sigma_hat = sigma * s every event factors:

* coordinates q > p contribute Phi(mu_q + s c_q) - Phi(mu_q - s c_q),
  with mu_q = (R theta)_q / sigma;
* coordinate p contributes the complement of the same expression and is
  correlated with Z through rho = C / (v xi).

For a scalar target the z-integral is a bivariate normal probability, leaving a
one-dimensional integral over s. For k >= 2 the integral over s is pushed inside
(a cumulative table) and the remaining expectation over w-space is done by
randomized quasi-Monte Carlo.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.special import ndtr

from ._special import (bvn_cdf, chi_scale_density, chi_scale_quantile, delta, gauss_cdf,
                       integrate, qmc_normal, std_delta)
from .errors import ConditioningError, ToleranceError
from .regression import (DesignMatrix, ParameterPoint, TargetMap, eta, finite_quantities,
                         limit_quantities)
from .selection import NestedFamily

__all__ = [
    "QuadratureConfig", "CdfValue", "CdfQuery", "LocalPerturbation", "delta",
    "chi_scale_density", "sel_prob_exact", "selection_probabilities", "cond_cdf_exact",
    "cond_cdf_grid", "cdf_at_selected", "limit_cdf", "limit_cdf_mc", "limit_sel_prob",
    "lemma_c1_bound", "limit_xi", "AT", "ABOVE",
]

AT = "at"        # p = max{p0(theta), O}
ABOVE = "above"  # p > max{p0(theta), O}
MIN_COND_PROB = 1e-10


@dataclass(frozen=True)
class QuadratureConfig:
    rtol: float = 1e-8
    n0: int = 32
    nmax: int = 4096
    tail: float = 1e-10
    z_mode: str = "auto"  # auto | closed | qmc
    qmc_points: int = 2 ** 16
    table_points: int = 4097
    seed: int = 0

    def __post_init__(self):
        if not (self.rtol > 0 and 0 < self.tail < 0.5):
            raise ValueError("tolerances must be positive")
        if self.n0 < 8 or self.nmax < self.n0 or self.qmc_points < 8:
            raise ValueError("node counts must be >= 8")
        if self.z_mode not in ("auto", "closed", "qmc"):
            raise ValueError(f"unknown z_mode {self.z_mode!r}")


@dataclass(frozen=True)
class CdfValue:
    value: float
    error: float
    method: str
    raw: float = field(default=np.nan, repr=False)

    def __float__(self):
        return self.value


def _clamped(raw, err, method):
    raw = float(raw)
    err = float(err)
    if not (-err - 1e-9 <= raw <= 1 + err + 1e-9):
        raise ToleranceError(f"probability {raw} outside [0,1] beyond its error {err}",
                             best=raw, error=err)
    return CdfValue(min(max(raw, 0.0), 1.0), err, method, raw)


@dataclass(frozen=True, eq=False)
class CdfQuery:
    design: DesignMatrix
    A: TargetMap
    t: np.ndarray
    p: int
    point: ParameterPoint
    family: NestedFamily

    def __post_init__(self):
        A = self.A if isinstance(self.A, TargetMap) else TargetMap(self.A)
        object.__setattr__(self, "A", A)
        t = np.atleast_1d(np.asarray(self.t, dtype=float))
        if t.shape != (A.k,):
            raise ValueError(f"t must have length k={A.k}")
        object.__setattr__(self, "t", t)
        if A.P != self.design.P or self.family.P != self.design.P:
            raise ValueError("A, family and design disagree on P")
        if self.point.theta.shape != (self.design.P,):
            raise ValueError("theta must have length P")
        if not self.family.O <= self.p <= self.design.P:
            raise ValueError(f"order must satisfy O <= p <= P, got {self.p}")


def query_seed(master, *parts):
    """Stable 63-bit seed from the master seed and the query contents."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for x in parts:
        h.update(np.ascontiguousarray(np.asarray(x, dtype=float)).tobytes())
    return int.from_bytes(h.digest(), "little") >> 1


# ----------------------------------------------------------------- finite n

class _Selection:
    """Everything about {p_hat = p} that depends only on (design, theta, sigma, family)."""

    def __init__(self, design, theta, sigma, family, quad):
        self.design = design
        self.sigma = float(sigma)
        self.family = family
        self.quad = quad
        self.d = design.n - design.P
        R = design.qr[1]
        self.mu = np.concatenate([[0.0], R @ np.asarray(theta, float) / sigma])
        self.c = family.c(design.n)
        self.O = family.O
        self.lo = float(chi_scale_quantile(self.d, quad.tail))
        self.hi = float(chi_scale_quantile(self.d, 1 - quad.tail))

    def above(self, p, s):
        """Product over q > p of P(|T_q| < c_q | sigma_hat = sigma s)."""
        out = np.ones_like(s)
        for q in range(p + 1, self.design.P + 1):
            out = out * std_delta(self.mu[q], s * self.c[q])
        return out

    def reject(self, p, s):
        if p == self.O:
            return np.ones_like(s)
        return 1.0 - std_delta(self.mu[p], s * self.c[p])

    def h(self, s):
        return chi_scale_density(self.d, s)

    def integrate(self, f, breaks=()):
        q = self.quad
        return integrate(f, self.lo, self.hi, rtol=q.rtol, atol=1e-14, n0=q.n0, nmax=q.nmax,
                         breaks=breaks)

    def probabilities(self):
        P, O = self.design.P, self.O
        orders = range(O, P + 1)
        breaks = []
        for p in range(O + 1, P + 1):
            # the reject factor is steepest where s c_p crosses |mu_p|
            breaks.append(abs(self.mu[p]) / self.c[p])

        def f(s):
            hs = self.h(s)
            return np.stack([hs * self.reject(p, s) * self.above(p, s) for p in orders], axis=-1)

        return self.integrate(f, breaks)

    def table(self, p):
        """Cumulative H(y) = int_0^y h(s) * above(p, s) ds on a grid over the s-domain."""
        s = np.linspace(self.lo, self.hi, self.quad.table_points)
        vals = self.h(s) * self.above(p, s)
        return s, cumulative_simpson(vals, x=s, initial=0.0)


def _ctx(query, quad):
    return _Selection(query.design, query.point.theta, query.point.sigma, query.family, quad)


def selection_probabilities(design, theta, sigma, family, quad=None):
    """P(p_hat = p) for p = O..P as (values, errors) arrays."""
    quad = quad or QuadratureConfig()
    sel = _Selection(design, theta, sigma, family, quad)
    return sel.probabilities()


def sel_prob_exact(query, quad=None):
    quad = quad or QuadratureConfig()
    sel = _ctx(query, quad)
    p = query.p
    br = [] if p == sel.O else [abs(sel.mu[p]) / sel.c[p]]
    val, err = sel.integrate(lambda s: sel.h(s) * sel.reject(p, s) * sel.above(p, s), br)
    return _clamped(val, err, "gauss-legendre")


def _shift(design, A, theta, p):
    return np.sqrt(design.n) * A @ (eta(design, theta, p) - np.asarray(theta, float))


def _kinks(x, mu, c):
    x = np.atleast_1d(x)
    x = x[np.isfinite(x)]
    return np.concatenate([(x + mu) / c, -(x + mu) / c, (x - mu) / c, (mu - x) / c])


def _numerator_scalar(sel, p, x, rho):
    """int h(s) above(s) P(Zs <= x, |mu_p + u| >= s c_p) ds for a vector of x."""
    mu, c = sel.mu[p], sel.c[p]

    def f(s):
        base = sel.h(s) * sel.above(p, s)
        S = s[:, None]
        inner = bvn_cdf(x[None, :], S * c - mu, rho) - bvn_cdf(x[None, :], -S * c - mu, rho)
        return base[:, None] * (ndtr(x)[None, :] - inner)

    breaks = list(_kinks(x, mu, c)) + [abs(mu) / c] if c > 0 else []
    return sel.integrate(f, breaks)


def _qmc_ratio(z, weight, tprime):
    """Batch ratio estimates of P(Z <= t') under the weight; z is (B, m, k)."""
    ind = np.all(z[None] <= tprime[:, None, None, :], axis=-1)  # (T, B, m)
    wsum = weight.sum(axis=-1)
    if np.any(wsum <= 0):
        raise ConditioningError("quasi-Monte Carlo batch with zero conditioning weight")
    est = (ind * weight[None]).sum(axis=-1) / wsum[None]
    B = est.shape[1]
    return est.mean(axis=1), est.std(axis=1, ddof=1) / np.sqrt(B)


def cond_cdf_grid(design, A, theta, sigma, family, p, ts, quad=None, *, sel_prob=None):
    """G(t|p) at each row of ``ts`` (shape (T, k) or (T,) for k = 1).

    Returns (values, errors, method). Used by :func:`cond_cdf_exact` and by the
    Monte Carlo harness, which needs whole t-grids per parameter point.
    """
    quad = quad or QuadratureConfig()
    A = A.A if isinstance(A, TargetMap) else np.atleast_2d(np.asarray(A, float))
    k = A.shape[0]
    ts = np.asarray(ts, dtype=float).reshape(-1, k)
    theta = np.asarray(theta, dtype=float)
    sel = _Selection(design, theta, sigma, family, quad)
    O = sel.O

    if sel_prob is None:
        br = [] if p == O else [abs(sel.mu[p]) / sel.c[p]]
        sel_prob, sp_err = sel.integrate(
            lambda s: sel.h(s) * sel.reject(p, s) * sel.above(p, s), br)
    else:
        sp_err = 0.0
    if sel_prob < MIN_COND_PROB:
        raise ConditioningError(f"P(p_hat = {p}) = {sel_prob:.3g} is numerically negligible",
                                probability=float(sel_prob))

    tprime = ts - _shift(design, A, theta, p)[None, :]
    if p == 0:
        val = np.all(tprime >= 0, axis=1).astype(float)
        return val, np.zeros_like(val), "point-mass"

    oq = finite_quantities(design, A, p)
    if p == O:
        # no constraint on the coordinates up to p: the Gaussian c.d.f. itself
        out = [gauss_cdf(sigma ** 2 * oq.cov, tp, seed=query_seed(quad.seed, tp, theta, design.n))
               for tp in tprime]
        val = np.array([o[0] for o in out])
        err = np.array([o[1] for o in out])
        if k == 1 and oq.cov[0, 0] > 0:
            _check_eq12(sel, p, tprime[:, 0] / (sigma * np.sqrt(oq.cov[0, 0])), oq.corr, val,
                        sel_prob)
        return val, err, "gaussian"

    mode = quad.z_mode
    if mode == "auto":
        mode = "closed" if k == 1 else "qmc"
    if mode == "closed" and k != 1:
        raise ValueError("closed-form z-integration needs a scalar target (k = 1)")

    if mode == "closed":
        v = np.sqrt(oq.cov[0, 0])
        if v == 0:
            val = (tprime[:, 0] >= 0).astype(float)
            return val, np.zeros_like(val), "degenerate"
        x = tprime[:, 0] / (sigma * v)
        num, nerr = _numerator_scalar(sel, p, x, oq.corr)
        val = num / sel_prob
        err = nerr / sel_prob + val * sp_err / sel_prob
        return val, err, "bvn-gauss-legendre"

    # quasi-Monte Carlo in w-space: w = sigma F x, u = x_p, Z0 = A[p] w
    seed = query_seed(quad.seed, design.n, p, theta, sigma, A, ts)
    x = qmc_normal(p, quad.qmc_points, seed)
    z = sigma * x @ (A[:, :p] @ oq.F).T
    s_grid, H = sel.table(p)
    y = np.abs(sel.mu[p] + x[..., p - 1]) / sel.c[p]
    weight = np.interp(y, s_grid, H, left=0.0, right=H[-1])
    val, err = _qmc_ratio(z, weight, tprime)
    return val, err, "qmc"


def _check_eq12(sel, p, x, rho, closed, sel_prob):
    """At p = O the s-integral formula must reproduce the Gaussian c.d.f."""
    num, nerr = _numerator_scalar(sel, p, x, rho)
    via = num / sel_prob
    tol = 1e-6 + 10 * nerr / sel_prob
    bad = np.abs(via - closed) > tol
    if np.any(bad):
        raise ToleranceError("conditional c.d.f. at the minimal order disagrees with the "
                             "Gaussian c.d.f.", best=via, error=np.abs(via - closed))


def cond_cdf_exact(query, quad=None):
    """G_{n,theta,sigma}(t|p) for one query."""
    quad = quad or QuadratureConfig()
    val, err, method = cond_cdf_grid(query.design, query.A, query.point.theta,
                                     query.point.sigma, query.family, query.p,
                                     query.t[None, :], quad)
    return _clamped(val[0], err[0], method)


def cdf_at_selected(sample, theta, sigma, family, A, t, quad=None):
    """G(t|p_hat) at the order selected on ``sample``."""
    from .selection import gts_select

    p_hat = gts_select(sample, family)
    q = CdfQuery(sample.design, A, t, p_hat, ParameterPoint(theta, sigma), family)
    return cond_cdf_exact(q, quad)


# ----------------------------------------------------------------- limits

def limit_xi(Q):
    """xi_{inf,q} for q = 1..P, as an array indexed 0..P-1."""
    L = np.linalg.cholesky(np.asarray(Q, dtype=float))
    return 1.0 / np.diag(L)


@dataclass(frozen=True, eq=False)
class LocalPerturbation:
    """Direction gamma of a local alternative theta + gamma / sqrt(n), with theta in M_p."""

    Q: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray | None = None

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        g = np.asarray(self.gamma, dtype=float).ravel()
        if Q.shape != (g.size, g.size):
            raise ValueError("Q and gamma disagree on P")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "gamma", g)

    @property
    def P(self):
        return self.gamma.size

    @property
    def nu(self):
        """nu_r for r = 1..P, as an array indexed 0..P-1."""
        Q, g, P = self.Q, self.gamma, self.P
        out = np.empty(P)
        for r in range(1, P + 1):
            out[r - 1] = g[r - 1]
            if r < P:
                out[r - 1] += np.linalg.solve(Q[:r, :r], Q[:r, r:] @ g[r:])[r - 1]
        return out

    def beta(self, A, p):
        """Limit of sqrt(n) A (eta_n(p) - theta - gamma/sqrt(n)); -A gamma at p = 0, 0 at p = P."""
        A = A.A if isinstance(A, TargetMap) else np.atleast_2d(A)
        Q, g, P = self.Q, self.gamma, self.P
        if p == 0:
            return -A @ g
        if p == P:
            return np.zeros(A.shape[0])
        head = np.linalg.solve(Q[:p, :p], Q[:p, p:] @ g[p:])
        return A @ np.concatenate([head, -g[p:]])

    def beta_from_nu(self, A, p):
        """Same limit written as -sum_{r>p} xi_r^-2 C_r nu_r."""
        A = A.A if isinstance(A, TargetMap) else np.atleast_2d(A)
        nu = self.nu
        out = np.zeros(A.shape[0])
        for r in range(p + 1, self.P + 1):
            lq = limit_quantities(self.Q, A, r)
            out -= lq.C * nu[r - 1] / lq.xi ** 2
        return out


def _limit_setup(Q, A, p, gamma, cls, family):
    A = A.A if isinstance(A, TargetMap) else np.atleast_2d(np.asarray(A, float))
    if cls not in (AT, ABOVE):
        raise ValueError(f"class must be {AT!r} or {ABOVE!r}")
    if not family.O <= p <= family.P:
        raise ValueError("order must satisfy O <= p <= P")
    if cls == ABOVE and p <= family.O:
        raise ValueError("class 'above' needs p > O")
    lp = LocalPerturbation(Q, gamma)
    return A, lp, lp.beta(A, p)


def limit_cdf(Q, A, sigma, p, gamma, cls, t, family, quad=None):
    """Large-sample limit of G(t|p) under theta + gamma/sqrt(n), theta in M_p.

    ``cls`` is AT when p = max{p0(theta), O} (Gaussian, shifted by beta) and
    ABOVE when p > max{p0(theta), O} (conditioned on rejecting order p).
    """
    quad = quad or QuadratureConfig()
    A, lp, beta = _limit_setup(Q, A, p, gamma, cls, family)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = A.shape[0]
    tb = t - beta
    if p == 0:
        return CdfValue(float(np.all(tb >= 0)), 0.0, "point-mass")
    lq = limit_quantities(Q, A, p)
    if cls == AT:
        val, err = gauss_cdf(sigma ** 2 * lq.cov, tb, seed=query_seed(quad.seed, tb, Q))
        return _clamped(val, err, "gaussian")

    c = family.c()[p]
    nt = lp.nu[p - 1] / (sigma * lq.xi)
    denom = 1.0 - float(std_delta(nt, c))
    if denom < MIN_COND_PROB:
        raise ConditioningError("limit conditioning probability is negligible", probability=denom)
    if k == 1:
        v = np.sqrt(lq.cov[0, 0])
        if v == 0:
            return CdfValue(float(tb[0] >= 0), 0.0, "degenerate")
        x = tb[0] / (sigma * v)
        rho = lq.corr
        num = ndtr(x) - (bvn_cdf(x, c - nt, rho) - bvn_cdf(x, -c - nt, rho))
        return _clamped(num / denom, 1e-12, "bvn")
    seed = query_seed(quad.seed, Q, A, p, gamma, t)
    x = qmc_normal(p, quad.qmc_points, seed)
    z = sigma * x @ (A[:, :p] @ lq.F).T
    weight = (np.abs(nt + x[..., p - 1]) >= c).astype(float)
    val, err = _qmc_ratio(z, weight, tb[None, :])
    return _clamped(val[0], err[0], "qmc")


def limit_cdf_mc(Q, A, sigma, p, gamma, cls, t, family, *, seed=0, reps=200_000,
                 chunk=100_000):
    """Monte Carlo evaluation of the limit through the independent W_r representation.

    Returns (value, se, accepted).
    """
    A, lp, _ = _limit_setup(Q, A, p, gamma, cls, family)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    P = lp.P
    xi = limit_xi(Q)
    nu = lp.nu
    coefs = []
    for r in range(1, P + 1):
        lq = limit_quantities(Q, A, r)
        coefs.append(lq.C / lq.xi ** 2)
    coefs = np.array(coefs)  # (P, k)
    shift = coefs[p:].T @ nu[p:] if p < P else np.zeros(A.shape[0])
    c = family.c()[p] if p > family.O else 0.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    hits = 0
    acc = 0
    done = 0
    while done < reps:
        m = min(chunk, reps - done)
        W = rng.standard_normal((m, P)) * (sigma * xi)
        Z = W[:, :p] @ coefs[:p] if p else np.zeros((m, A.shape[0]))
        ok = np.all(Z <= t + shift, axis=1)
        if cls == ABOVE:
            keep = np.abs(W[:, p - 1] + nu[p - 1]) >= c * sigma * xi[p - 1]
            ok = ok & keep
            acc += int(keep.sum())
        else:
            acc += m
        hits += int(ok.sum())
        done += m
    if acc == 0:
        raise ConditioningError("no accepted Monte Carlo draws", probability=0.0)
    f = hits / acc
    return f, float(np.sqrt(max(f * (1 - f), 0.0) / acc)), acc


def limit_sel_prob(Q, family, sigma, p, v):
    """Limit of P(p_hat = p) along sequences with sqrt(n) theta_q-type limits v_p..v_P.

    ``v`` has P - p + 1 entries (v_p, ..., v_P) in the extended reals; entries
    at +-inf contribute a zero Delta term. v_p is ignored when p = O.
    """
    P = family.P
    v = np.asarray(v, dtype=float).ravel()
    if v.size != P - p + 1:
        raise ValueError(f"need {P - p + 1} values v_p..v_P")
    if not family.O <= p <= P:
        raise ValueError("order must satisfy O <= p <= P")
    c = family.c()
    xi = limit_xi(Q)
    out = 1.0
    for q in range(p + 1, P + 1):
        s = sigma * xi[q - 1]
        out *= delta(s, v[q - p], c[q] * s)
    if p > family.O:
        s = sigma * xi[p - 1]
        out *= 1.0 - delta(s, v[0], c[p] * s)
    return float(out)


def lemma_c1_bound(family, p):
    """2 (1 - Phi(c_p)) prod_{q>p} (2 Phi(c_q) - 1)."""
    if not family.O < p <= family.P:
        raise ValueError("order must satisfy O < p <= P")
    c = family.c()
    out = 2.0 * ndtr(-c[p])
    for q in range(p + 1, family.P + 1):
        out *= 2.0 * ndtr(c[q]) - 1.0
    return float(out)
