"""Model selection: the general-to-specific t-test cascade over nested models
and information-criterion selection over a set of inclusion masks.

Scalar functions take a :class:`~postsel.regression.Sample`; the ``*_batch``
variants take a :class:`~postsel.regression.SampleBatch` and are what the
Monte Carlo harness uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateResidualError
from .regression import DEGENERATE_RSS, SampleBatch, restricted_ls, sigma_hat, subset_ls


@dataclass(frozen=True, eq=False)
class NestedFamily:
    """Orders O..P with critical values ``c[O+1..P]``.

    ``crit`` lists c_{O+1}, ..., c_P. ``schedule``, when given, maps n to such a
    list and overrides ``crit`` at that sample size.
    """

    O: int
    crit: tuple
    schedule: Callable[[int], "np.ndarray"] | None = None

    def __post_init__(self):
        crit = tuple(float(c) for c in np.atleast_1d(self.crit))
        object.__setattr__(self, "crit", crit)
        if self.O < 0:
            raise ValueError("O must be >= 0")
        if not crit:
            raise ValueError("need at least one critical value (O < P)")
        self._check(crit)

    @staticmethod
    def _check(crit):
        if not all(np.isfinite(c) and c > 0 for c in crit):
            raise ValueError("critical values must be positive and finite")

    @classmethod
    def constant(cls, O, P, c):
        return cls(O, (c,) * (P - O))

    @property
    def P(self):
        return self.O + len(self.crit)

    def c(self, n=None):
        """Length P+1 array indexed by order; entry O is 0, entries below O are nan."""
        crit = self.crit
        if self.schedule is not None and n is not None:
            crit = tuple(float(v) for v in np.atleast_1d(self.schedule(n)))
            if len(crit) != len(self.crit):
                raise ValueError("schedule returned the wrong number of critical values")
            self._check(crit)
        out = np.full(self.P + 1, np.nan)
        out[self.O] = 0.0
        out[self.O + 1:] = crit
        return out


def _mask_tuple(r):
    return tuple(int(bool(v)) for v in r)


@dataclass(frozen=True, eq=False)
class SubsetFamily:
    """Candidate masks with an information-criterion penalty Upsilon_n.

    ``upsilon`` is the constant penalty (2 gives AIC); ``schedule`` optionally
    maps n to Upsilon_n.
    """

    masks: tuple
    upsilon: float = 2.0
    schedule: Callable[[int], float] | None = None

    def __post_init__(self):
        masks = tuple(sorted({_mask_tuple(r) for r in self.masks}, key=lambda m: (sum(m), m)))
        if not masks:
            raise ValueError("mask set is empty")
        P = len(masks[0])
        if any(len(m) != P for m in masks):
            raise ValueError("masks have different lengths")
        if (1,) * P not in masks:
            raise ValueError("mask set must contain the full model")
        if not any(sum(m) == P - 1 for m in masks):
            raise ValueError("mask set must contain a model with P-1 regressors")
        if not (np.isfinite(self.upsilon) and self.upsilon > 0):
            raise ValueError("upsilon must be positive")
        object.__setattr__(self, "masks", masks)

    @classmethod
    def all_subsets(cls, P, upsilon=2.0):
        grid = np.array(np.meshgrid(*[[0, 1]] * P, indexing="ij")).reshape(P, -1).T
        return cls(tuple(map(tuple, grid)), upsilon)

    @property
    def P(self):
        return len(self.masks[0])

    @property
    def full(self):
        return (1,) * self.P

    def penalty(self, n):
        return float(self.schedule(n)) if self.schedule is not None else self.upsilon


@dataclass(frozen=True, eq=False)
class ThresholdRule:
    """Selects the full model iff the full-model |t| for coordinate i(r_*) is >= c, else r_*."""

    r_star: tuple
    c: float

    def __post_init__(self):
        r = _mask_tuple(self.r_star)
        if sum(r) != len(r) - 1:
            raise ValueError("r_star must drop exactly one regressor")
        object.__setattr__(self, "r_star", r)

    @property
    def P(self):
        return len(self.r_star)

    @property
    def index(self):
        """1-based position i(r_*) of the excluded regressor."""
        return self.r_star.index(0) + 1

    @property
    def masks(self):
        return (self.r_star, (1,) * self.P)


@dataclass(frozen=True)
class SelectionOutcome:
    """Nested case: ``order`` set and ``stats`` = (T_0..T_P). Subset case: ``mask`` and per-mask ``stats``."""

    kind: str
    order: int | None = None
    mask: tuple | None = None
    stats: np.ndarray | None = None


# ----------------------------------------------------------------- nested

def t_stat(sample, p):
    if p == 0:
        return 0.0
    design = sample.design
    if not 0 < p <= design.P:
        raise ValueError(f"order must satisfy 0 <= p <= P, got {p}")
    s = sigma_hat(sample)
    R = design.qr[1]
    theta_p = restricted_ls(sample, p)[p - 1]
    xi = np.sqrt(design.n) / R[p - 1, p - 1]
    return float(np.sqrt(design.n) * theta_p / (s * xi))


def _cascade(T, c, O):
    """p_hat from t-statistics (..., P+1) and critical values c (P+1,)."""
    hits = np.abs(T[..., O:]) >= c[O:]
    hits[..., 0] = True
    last = hits.shape[-1] - 1 - np.argmax(hits[..., ::-1], axis=-1)
    return O + last


def gts_select(sample, family):
    """Order selected by testing downward from P; returns an int in {O..P}."""
    return gts_outcome(sample, family).order


def gts_outcome(sample, family):
    P = sample.design.P
    if family.P != P:
        raise ValueError(f"family has P={family.P}, design has P={P}")
    T = np.array([t_stat(sample, p) for p in range(P + 1)])
    p_hat = int(_cascade(T, family.c(sample.design.n), family.O))
    return SelectionOutcome("nested", order=p_hat, stats=T)


def gts_select_batch(batch, family):
    if family.P != batch.design.P:
        raise ValueError(f"family has P={family.P}, design has P={batch.design.P}")
    return _cascade(batch.t_stats, family.c(batch.design.n), family.O)


# ----------------------------------------------------------------- subsets

def _rss(sample, r):
    resid = sample.y - sample.design.X @ subset_ls(sample, r)
    return float(resid @ resid)


def ic_score(sample, r, upsilon_n):
    rss = _rss(sample, r)
    if rss < DEGENERATE_RSS:
        raise DegenerateResidualError("RSS(r) is numerically zero")
    return float(np.log(rss) + sum(_mask_tuple(r)) * upsilon_n / sample.design.n)


def ic_outcome(sample, family):
    if isinstance(family, ThresholdRule):
        T = full_model_t(sample, family.index)
        mask = family.masks[1] if abs(T) >= family.c else family.r_star
        return SelectionOutcome("subset", mask=mask, stats=np.array([T]))
    ups = family.penalty(sample.design.n)
    scores = np.array([ic_score(sample, r, ups) for r in family.masks])
    # masks are pre-sorted by (|r|, lexicographic), so argmin applies the tie-break
    return SelectionOutcome("subset", mask=family.masks[int(np.argmin(scores))], stats=scores)


def ic_select(sample, family):
    """Minimizing mask; ties go to the smallest |r|, then the lexicographically smallest mask."""
    return ic_outcome(sample, family).mask


def ic_scores_batch(batch, family):
    n = batch.design.n
    ups = family.penalty(n)
    out = np.empty((len(batch), len(family.masks)))
    for j, r in enumerate(family.masks):
        rss = batch.subset_fit(r)[1]
        if np.any(rss < DEGENERATE_RSS):
            raise DegenerateResidualError("RSS(r) is numerically zero")
        out[:, j] = np.log(rss) + sum(r) * ups / n
    return out


def ic_select_batch(batch, family):
    """Index into ``family.masks`` of the selected mask, per replication."""
    if isinstance(family, ThresholdRule):
        T = full_model_t_batch(batch, family.index)
        return np.where(np.abs(T) >= family.c, 1, 0)
    return np.argmin(ic_scores_batch(batch, family), axis=1)


# ----------------------------------------------------------------- estimators

def pmse(sample, rule):
    """Post-model-selection estimate and the selection outcome behind it."""
    if isinstance(rule, NestedFamily):
        out = gts_outcome(sample, rule)
        return restricted_ls(sample, out.order), out
    out = ic_outcome(sample, rule)
    return subset_ls(sample, out.mask), out


def full_model_t(sample, i):
    design = sample.design
    if not 1 <= i <= design.P:
        raise ValueError(f"coordinate must be in 1..P, got {i}")
    return float(full_model_t_batch(sample.as_batch(), i)[0])


def full_model_t_batch(batch, i):
    from scipy import linalg

    R = batch.design.qr[1]
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    theta = batch.g @ Rinv.T
    # sqrt(n) theta_i / (sigma_hat sqrt([(X'X/n)^-1]_ii)) with (X'X/n)^-1 = n Rinv Rinv'
    return theta[:, i - 1] / (batch.sigma_hat * np.linalg.norm(Rinv[i - 1]))


def condition24_probe(batch, family, r_star, c):
    """Frequencies of {r_hat = r_full} sym-diff {|T| >= c} and {r_hat = r_*} sym-diff {|T| < c}.

    Returns ((freq_full, se_full), (freq_star, se_star)) over the replications in ``batch``.
    """
    r_star = _mask_tuple(r_star)
    i = r_star.index(0) + 1
    masks = family.masks
    sel = ic_select_batch(batch, family)
    chosen = np.array(masks)[sel]
    is_full = np.all(chosen == 1, axis=1)
    is_star = np.all(chosen == np.array(r_star), axis=1)
    big = np.abs(full_model_t_batch(batch, i)) >= c
    m = len(batch)
    out = []
    for ev in (is_full ^ big, is_star ^ ~big):
        f = ev.mean()
        out.append((float(f), float(np.sqrt(max(f * (1 - f), 0.0) / m))))
    return tuple(out)


def selected_estimates_batch(batch, rule):
    """(m, P) post-model-selection estimates and the per-replication selection index."""
    if isinstance(rule, NestedFamily):
        p_hat = gts_select_batch(batch, rule)
        est = np.zeros(batch.g.shape)
        for p in np.unique(p_hat):
            rows = p_hat == p
            est[rows] = batch.subset(rows).restricted(int(p))
        return est, p_hat
    sel = ic_select_batch(batch, rule)
    est = np.zeros(batch.g.shape)
    for j in np.unique(sel):
        rows = sel == j
        est[rows] = batch.subset(rows).subset_fit(rule.masks[j])[0]
    return est, sel


__all__ = [
    "NestedFamily", "SubsetFamily", "ThresholdRule", "SelectionOutcome",
    "t_stat", "gts_select", "gts_outcome", "gts_select_batch",
    "ic_score", "ic_select", "ic_outcome", "ic_scores_batch", "ic_select_batch",
    "pmse", "full_model_t", "full_model_t_batch", "condition24_probe",
    "selected_estimates_batch", "SampleBatch",
]
