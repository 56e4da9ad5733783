"""Scalar building blocks: the Delta function, the scaled-chi density,
bivariate/multivariate normal probabilities and Gauss-Legendre integration.

Everything here is vectorized over numpy arrays.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import stats
from scipy.special import gammaln, ndtr, ndtri, owens_t, roots_legendre

from .errors import ToleranceError

# standardized arguments beyond this are treated as infinite
_ZCLIP = 40.0


def norm_cdf(x):
    return ndtr(x)


def delta(s, a, b):
    """P(|N - a| < b) for N ~ N(0, s^2).

    ``a`` may be +-inf (probability 0); ``s = 0`` gives the indicator of
    ``|a| < b``; ``b <= 0`` gives 0.
    """
    s, a, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (s, a, b)))
    out = np.zeros(s.shape)
    finite = np.isfinite(a) & (b > 0)
    pos = finite & (s > 0)
    if np.any(pos):
        sp, ap, bp = s[pos], np.abs(a[pos]), b[pos]
        out[pos] = ndtr((bp - ap) / sp) - ndtr((-bp - ap) / sp)
    degen = finite & (s <= 0)
    out[degen] = (np.abs(a[degen]) < b[degen]).astype(float)
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def std_delta(mu, c):
    """Delta in standardized form: P(|N(0,1) + mu| < c) = Phi(mu + c) - Phi(mu - c)."""
    mu = np.abs(np.asarray(mu, dtype=float))
    out = ndtr(c - mu) - ndtr(-c - mu)
    return np.where(np.isfinite(mu), np.clip(out, 0.0, 1.0), 0.0)


def chi_scale_logpdf(d, s):
    """Log density of sqrt(V/d), V ~ chi-square with d degrees of freedom."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore"):
        logs = np.log(s)
    out = (np.log(2.0) + 0.5 * d * np.log(d / 2.0) - gammaln(d / 2.0)
           + (d - 1) * logs - 0.5 * d * s * s)
    return np.where(s > 0, out, -np.inf)


def chi_scale_density(d, s):
    """Density ``h`` of the ratio sigma_hat / sigma with ``d`` residual degrees of freedom."""
    if d < 1:
        raise ValueError("degrees of freedom must be >= 1")
    out = np.exp(chi_scale_logpdf(d, s))
    return out if np.ndim(out) else float(out)


def chi_scale_quantile(d, q):
    return np.sqrt(stats.chi2.ppf(q, d) / d)


def bvn_cdf(h, k, rho):
    """P(X <= h, Y <= k) for standard bivariate normal with correlation rho.

    Uses Owen's T decomposition; rho = +-1 and infinite limits are exact.
    """
    h, k, rho = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (h, k, rho)))
    out = np.empty(h.shape)
    rho = np.clip(rho, -1.0, 1.0)
    hc = np.where(h > _ZCLIP, np.inf, np.where(h < -_ZCLIP, -np.inf, h))
    kc = np.where(k > _ZCLIP, np.inf, np.where(k < -_ZCLIP, -np.inf, k))

    done = np.zeros(h.shape, dtype=bool)
    lo = (hc == -np.inf) | (kc == -np.inf)
    out[lo] = 0.0
    done |= lo
    m = ~done & (hc == np.inf)
    out[m] = ndtr(kc[m])
    done |= m
    m = ~done & (kc == np.inf)
    out[m] = ndtr(hc[m])
    done |= m
    m = ~done & (rho == 1.0)
    out[m] = ndtr(np.minimum(hc[m], kc[m]))
    done |= m
    m = ~done & (rho == -1.0)
    out[m] = np.maximum(0.0, ndtr(hc[m]) - ndtr(-kc[m]))
    done |= m

    m = ~done
    if np.any(m):
        hh, kk, rr = hc[m], kc[m], rho[m]
        root = np.sqrt((1.0 - rr) * (1.0 + rr))
        both0 = (hh == 0) & (kk == 0)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ah = np.where(hh == 0, np.sign(kk - rr * hh) * np.inf, (kk - rr * hh) / (hh * root))
            ak = np.where(kk == 0, np.sign(hh - rr * kk) * np.inf, (hh - rr * kk) / (kk * root))
        ah = np.nan_to_num(ah, nan=0.0)
        ak = np.nan_to_num(ak, nan=0.0)
        # signs, not the product: h * k can underflow to zero
        sgn = np.sign(hh) * np.sign(kk)
        beta = np.where((sgn > 0) | ((sgn == 0) & (hh + kk >= 0)), 0.0, 0.5)
        val = 0.5 * ndtr(hh) + 0.5 * ndtr(kk) - owens_t(hh, ah) - owens_t(kk, ak) - beta
        val = np.where(both0, 0.25 + np.arcsin(rr) / (2 * np.pi), val)
        out[m] = val
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def qmc_normal(dim, npts, seed, *, batches=8):
    """Scrambled Sobol standard-normal points, ``batches`` independent scrambles.

    Returns an array of shape (batches, npts // batches, dim).
    """
    from scipy.stats import qmc

    per = max(1, npts // batches)
    m = int(np.ceil(np.log2(per)))
    ss = np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(batches):
        eng = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng(child))
        u = eng.random_base2(m)[:per]
        out.append(ndtri(np.clip(u, 1e-16, 1 - 1e-16)))
    return np.stack(out)


def gauss_cdf(cov, t, *, seed=0, npts=2 ** 16):
    """P(Z <= t) for Z ~ N(0, cov), cov possibly singular. Returns (value, error).

    k = 1, 2 are exact; k >= 3 uses randomized QMC in the range of ``cov``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = cov.shape[0]
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if k == 1:
        if sd[0] == 0:
            return float(t[0] >= 0), 0.0
        return float(ndtr(t[0] / sd[0])), 0.0
    if k == 2:
        zero = sd == 0
        if zero.all():
            return float(np.all(t >= 0)), 0.0
        if zero.any():
            i = int(np.argmax(~zero))
            return float(np.all(t[zero] >= 0)) * float(ndtr(t[i] / sd[i])), 0.0
        r = cov[0, 1] / (sd[0] * sd[1])
        return float(bvn_cdf(t[0] / sd[0], t[1] / sd[1], r)), 0.0
    w, v = np.linalg.eigh(cov)
    keep = w > 1e-12 * max(w.max(), 0.0)
    if not keep.any():
        return float(np.all(t >= 0)), 0.0
    fac = v[:, keep] * np.sqrt(w[keep])
    x = qmc_normal(int(keep.sum()), npts, seed)
    z = x @ fac.T
    est = np.all(z <= t, axis=-1).mean(axis=1)
    return float(est.mean()), float(est.std(ddof=1) / np.sqrt(len(est)))


@lru_cache(maxsize=None)
def _gl_rule(n):
    x, w = roots_legendre(n)
    return x, w


def integrate(f, a, b, *, rtol=1e-8, atol=1e-14, n0=32, nmax=4096, breaks=()):
    """Gauss-Legendre integration of vectorized ``f`` over [a, b] with node doubling.

    ``f`` maps an array of abscissae of shape (m,) to an array of shape (m, ...).
    The interval is split at the interior ``breaks``. Returns (integral, abserr)
    with the same trailing shape as ``f``'s output. Raises ToleranceError if
    node doubling stalls before ``nmax``.
    """
    pts = sorted({a, b, *[x for x in breaks if a < x < b]})
    total = 0.0
    err = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi - lo <= 0:
            continue
        half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)

        def rule(n):
            x, w = _gl_rule(n)
            vals = np.asarray(f(mid + half * x))
            return half * np.tensordot(w, vals, axes=(0, 0))

        n = n0
        prev = rule(n)
        while True:
            n *= 2
            cur = rule(n)
            diff = np.abs(cur - prev)
            if np.all(diff <= np.maximum(rtol * np.abs(cur), atol)):
                break
            if n >= nmax:
                raise ToleranceError("Gauss-Legendre node doubling did not converge",
                                     best=total + cur, error=err + diff)
            prev = cur
        total = total + cur
        err = err + diff
    return total, err
