"""Fixed-design Gaussian linear regression: restricted least squares, the
variance estimator and the projection quantities that feed the conditional
distribution formulas.

All solves go through the thin QR factorization ``X = Qx R`` (``R`` with a
positive diagonal). Two consequences are used throughout the package:

* the restricted estimator of order ``p`` only needs ``g = Qx'Y`` and the
  leading ``p x p`` block of ``R``;
* ``RSS`` of any submodel equals ``RSS_full + ||g - R_r beta_r||^2``.

So ``(g, RSS_full)`` is a sufficient statistic for everything downstream,
which is what :class:`SampleBatch` carries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import DegenerateResidualError, SingularDesignError

# Gram condition threshold (smallest / largest eigenvalue)
_RANK_TOL = 1e-10
# generalized-inverse truncation, relative to the largest singular value
_PINV_RTOL = 1e-12
ZETA_CLAMP = 1e-10
DEGENERATE_RSS = 1e-30


def _check_gram(G, what):
    if not np.allclose(G, G.T, rtol=1e-10, atol=1e-12):
        raise SingularDesignError(f"{what} is not symmetric")
    ev = np.linalg.eigvalsh(G)
    if ev[-1] <= 0 or ev[0] <= _RANK_TOL * ev[-1]:
        raise SingularDesignError(f"{what} is singular or not positive definite "
                                  f"(eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})")


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Nonstochastic n x P regressor matrix, with an optional limit ``Q`` of X'X/n."""

    X: np.ndarray
    Q: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise SingularDesignError("design must be a 2-d array")
        n, P = X.shape
        if not n > P >= 1:
            raise SingularDesignError(f"need n > P >= 1, got n={n}, P={P}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        _check_gram(X.T @ X / n, "X'X/n")
        if self.Q is not None:
            Q = np.array(self.Q, dtype=float)
            if Q.shape != (P, P):
                raise SingularDesignError(f"Q must be {P}x{P}, got {Q.shape}")
            _check_gram(Q, "Q")
            Q.setflags(write=False)
            object.__setattr__(self, "Q", Q)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def P(self):
        return self.X.shape[1]

    @cached_property
    def gram(self):
        """Q_n = X'X/n."""
        return self.X.T @ self.X / self.n

    @property
    def Q_limit(self):
        return self.gram if self.Q is None else self.Q

    @cached_property
    def qr(self):
        Qx, R = linalg.qr(self.X, mode="economic")
        sgn = np.where(np.diag(R) < 0, -1.0, 1.0)
        return Qx * sgn, R * sgn[:, None]

    @classmethod
    def synthetic(cls, n, Q, *, seed=0, perturbation=None):
        """Design with X'X/n equal to ``Q + perturbation / n`` exactly.

        The column space is a seeded random n x P orthonormal frame, so
        designs for different ``n`` share the same limit ``Q``.
        """
        Q = np.asarray(Q, dtype=float)
        P = Q.shape[0]
        target = Q if perturbation is None else Q + np.asarray(perturbation, float) / n
        _check_gram(target, "target Gram matrix")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n,)))
        U, _ = np.linalg.qr(rng.standard_normal((n, P)))
        L = np.linalg.cholesky(target)
        return cls(np.sqrt(n) * U @ L.T, Q=Q)

    @classmethod
    def orthogonal(cls, n, P, *, seed=0):
        return cls.synthetic(n, np.eye(P), seed=seed)

    @classmethod
    def from_csv(cls, path, q_path=None):
        """Read rows = observations; a non-numeric first row is taken as a header."""
        X = _read_matrix(path)
        Q = None if q_path is None else _read_matrix(q_path)
        return cls(X, Q=Q)


def _read_matrix(path):
    with open(Path(path), newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise SingularDesignError(f"{path}: empty file")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    return np.array([[float(c) for c in r] for r in rows], dtype=float)


@dataclass(frozen=True, eq=False)
class TargetMap:
    """k x P matrix A of full row rank defining the target sqrt(n) A (theta_tilde - theta)."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        if not 1 <= A.shape[0] <= A.shape[1]:
            raise ValueError(f"A must be k x P with 1 <= k <= P, got {A.shape}")
        if np.linalg.matrix_rank(A) != A.shape[0]:
            raise ValueError("A must have full row rank")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def k(self):
        return self.A.shape[0]

    @property
    def P(self):
        return self.A.shape[1]


@dataclass(frozen=True, eq=False)
class ParameterPoint:
    theta: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive and finite")
        object.__setattr__(self, "sigma", float(self.sigma))


@dataclass(frozen=True)
class ProjectionQuantities:
    """Per-order scalars and vectors; ``*_inf`` are the large-sample limits."""

    p: int
    xi: float
    C: np.ndarray
    zeta: float
    b: np.ndarray
    cov: np.ndarray  # A[p] (X[p]'X[p]/n)^-1 A[p]'
    xi_inf: float
    C_inf: np.ndarray
    zeta_inf: float
    b_inf: np.ndarray
    cov_inf: np.ndarray


@dataclass(frozen=True)
class OrderQuantities:
    """One set (finite-n or limit) of the order-p quantities. ``F`` satisfies F F' = M^-1."""

    p: int
    xi: float
    C: np.ndarray
    zeta2: float
    b: np.ndarray
    cov: np.ndarray
    F: np.ndarray = field(repr=False)

    @property
    def zeta(self):
        return float(np.sqrt(self.zeta2))

    @property
    def corr(self):
        """Correlation between the scalar target and the order-p coefficient (k = 1)."""
        v = np.sqrt(self.cov[0, 0])
        if v == 0:
            return 0.0
        return float(np.clip(self.C[0] / (v * self.xi), -1.0, 1.0))


def _order_quantities(U, Ap, p):
    """Quantities for Gram block M = U'U (U upper triangular, p x p)."""
    F = linalg.solve_triangular(U, np.eye(p), lower=False)
    AF = Ap @ F
    cov = AF @ AF.T
    xi2 = 1.0 / U[p - 1, p - 1] ** 2
    C = AF @ F[p - 1, :]
    G = np.linalg.pinv(cov, rcond=_PINV_RTOL, hermitian=True)
    b = C @ G
    zeta2 = xi2 - C @ G @ C
    if zeta2 < 0:
        if zeta2 < -ZETA_CLAMP * max(1.0, xi2):
            raise ArithmeticError(f"zeta^2 = {zeta2:.3g} is negative beyond rounding")
        zeta2 = 0.0
    if zeta2 <= ZETA_CLAMP * xi2:
        zeta2 = 0.0
    return OrderQuantities(p, float(np.sqrt(xi2)), C, float(zeta2), b, cov, F)


def finite_quantities(design, A, p):
    A = A.A if isinstance(A, TargetMap) else np.atleast_2d(A)
    if not 0 < p <= design.P:
        raise ValueError(f"order must satisfy 0 < p <= P, got {p}")
    R = design.qr[1]
    return _order_quantities(R[:p, :p] / np.sqrt(design.n), A[:, :p], p)


def limit_quantities(Q, A, p):
    A = A.A if isinstance(A, TargetMap) else np.atleast_2d(A)
    Q = np.asarray(Q, dtype=float)
    if not 0 < p <= Q.shape[0]:
        raise ValueError(f"order must satisfy 0 < p <= P, got {p}")
    U = np.linalg.cholesky(Q[:p, :p]).T
    return _order_quantities(U, A[:, :p], p)


def projection_quantities(design, A, p):
    fin = finite_quantities(design, A, p)
    lim = limit_quantities(design.Q_limit, A, p)
    return ProjectionQuantities(
        p=p, xi=fin.xi, C=fin.C, zeta=fin.zeta, b=fin.b, cov=fin.cov,
        xi_inf=lim.xi, C_inf=lim.C, zeta_inf=lim.zeta, b_inf=lim.b, cov_inf=lim.cov,
    )


def asymptotic_variance_terms(Q, A, sigma=1.0):
    """Per-order terms sigma^2 xi_r^-2 C_r C_r' (r = 1..P) of the limit variance of sqrt(n) A theta_tilde."""
    P = np.asarray(Q).shape[0]
    terms = []
    for r in range(1, P + 1):
        q = limit_quantities(Q, A, r)
        terms.append(sigma ** 2 * np.outer(q.C, q.C) / q.xi ** 2)
    return terms


def order_of(theta):
    """Smallest p such that theta_{p+1} = ... = theta_P = 0 (exact zeros)."""
    nz = np.flatnonzero(np.asarray(theta) != 0)
    return int(nz[-1] + 1) if nz.size else 0


def eta(design, theta, p):
    """Mean of the order-p restricted least-squares estimator."""
    theta = np.asarray(theta, dtype=float)
    P = design.P
    if not 0 <= p <= P:
        raise ValueError(f"order must satisfy 0 <= p <= P, got {p}")
    if p == 0:
        return np.zeros(P)
    if p == P:
        return theta.copy()
    R = design.qr[1]
    out = np.zeros(P)
    out[:p] = theta[:p] + linalg.solve_triangular(R[:p, :p], R[:p, p:] @ theta[p:])
    return out


class Sample:
    """One realization (design, Y)."""

    def __init__(self, design, y):
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != design.n:
            raise ValueError(f"Y has length {y.shape[0]}, design has n={design.n}")
        self.design = design
        self.y = y

    @cached_property
    def g(self):
        return self.design.qr[0].T @ self.y

    @cached_property
    def rss(self):
        resid = self.y - self.design.qr[0] @ self.g
        return float(resid @ resid)

    def as_batch(self):
        return SampleBatch(self.design, self.g[None, :], np.array([self.rss]))


def restricted_ls(sample, p):
    """Least squares under theta_{p+1} = ... = theta_P = 0, as a P-vector."""
    design = sample.design
    if not 0 <= p <= design.P:
        raise ValueError(f"order must satisfy 0 <= p <= P, got {p}")
    out = np.zeros(design.P)
    if p:
        R = design.qr[1]
        out[:p] = linalg.solve_triangular(R[:p, :p], sample.g[:p])
    return out


def subset_ls(sample, r):
    """Least squares in the submodel keeping the columns with mask r_i = 1."""
    r = np.asarray(r, dtype=bool)
    if r.shape != (sample.design.P,):
        raise ValueError("mask length must equal P")
    out = np.zeros(sample.design.P)
    if r.any():
        Qr, Rr = linalg.qr(sample.design.X[:, r], mode="economic")
        d = np.abs(np.diag(Rr))
        if d.min() <= 1e-12 * d.max():
            raise SingularDesignError("submodel design is singular")
        out[r] = linalg.solve_triangular(Rr, Qr.T @ sample.y)
    return out


def sigma_hat(sample):
    n, P = sample.design.n, sample.design.P
    s2 = sample.rss / (n - P)
    if s2 < DEGENERATE_RSS:
        raise DegenerateResidualError("degenerate residual: sigma_hat^2 is numerically zero")
    return float(np.sqrt(s2))


class SampleBatch:
    """Many replications of one design, held as sufficient statistics.

    ``g`` has shape (m, P) and equals Qx'Y per replication; ``rss`` holds the
    full-model residual sums of squares.
    """

    def __init__(self, design, g, rss):
        self.design = design
        self.g = np.asarray(g, dtype=float)
        self.rss = np.asarray(rss, dtype=float)

    def __len__(self):
        return self.g.shape[0]

    @cached_property
    def sigma_hat(self):
        s2 = self.rss / (self.design.n - self.design.P)
        if np.any(s2 < DEGENERATE_RSS):
            raise DegenerateResidualError("degenerate residual in batch")
        return np.sqrt(s2)

    @cached_property
    def t_stats(self):
        """(m, P+1) array; column p holds T_p, column 0 holds T_0 = 0."""
        # theta_p(p) = g_p / R_pp and xi_{n,p} = sqrt(n) / R_pp, so T_p = g_p / sigma_hat
        T = np.zeros((len(self), self.design.P + 1))
        T[:, 1:] = self.g / self.sigma_hat[:, None]
        return T

    def restricted(self, p):
        """(m, P) restricted least-squares estimates of order p."""
        P = self.design.P
        out = np.zeros((len(self), P))
        if p:
            R = self.design.qr[1]
            out[:, :p] = linalg.solve_triangular(R[:p, :p], self.g[:, :p].T).T
        return out

    def rss_nested(self, p):
        return self.rss + np.sum(self.g[:, p:] ** 2, axis=1)

    def subset_fit(self, r):
        """Coefficients (m, P) and RSS (m,) of the submodel with mask r."""
        r = np.asarray(r, dtype=bool)
        R = self.design.qr[1]
        coef = np.zeros((len(self), self.design.P))
        if not r.any():
            return coef, self.rss + np.sum(self.g ** 2, axis=1)
        Rr = R[:, r]
        beta = np.linalg.lstsq(Rr, self.g.T, rcond=None)[0].T
        resid = self.g - beta @ Rr.T
        coef[:, r] = beta
        return coef, self.rss + np.sum(resid ** 2, axis=1)

    def subset(self, idx):
        return SampleBatch(self.design, self.g[idx], self.rss[idx])
