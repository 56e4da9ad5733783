"""Seeded simulation harness.

Replications are drawn in fixed-size blocks. Block ``b`` of grid point ``j`` at
sample size ``n`` uses the Philox stream keyed by
``SeedSequence(master, spawn_key=(n, j, b))``, so results do not depend on the
number of worker threads or on evaluation order.

Samples are drawn as sufficient statistics: g = Qx'Y ~ N(R theta, sigma^2 I_P)
and RSS_full ~ sigma^2 chi^2_{n-P}, independent. This is exactly the law of
(Qx'Y, RSS) under the Gaussian model and costs O(P) per replication instead of
O(nP). :func:`draw_sample` still produces full response vectors.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .cond_dist import (ABOVE, AT, MIN_COND_PROB, QuadratureConfig, cond_cdf_grid, limit_cdf,
                        lemma_c1_bound, selection_probabilities)
from .errors import ConditioningError
from .estimators import check_cdf_selected_batch, plugin_phi_batch
from .regression import DesignMatrix, SampleBatch, TargetMap, limit_quantities, order_of
from .selection import (NestedFamily, SubsetFamily, ThresholdRule, condition24_probe,
                        selected_estimates_batch)

LEDGER_SCHEMA = "postsel-ledger v1"
SUMMARY_SCHEMA = "postsel-summary v1"


# ----------------------------------------------------------------- sampling

def block_rng(master, n, grid_idx, block_idx):
    ss = np.random.SeedSequence(int(master), spawn_key=(int(n), int(grid_idx), int(block_idx)))
    return np.random.Generator(np.random.Philox(ss))


def draw_sample(design, theta, sigma, rng):
    """Y = X theta + sigma * u with u iid standard normal from ``rng``."""
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError("sigma must be positive and finite")
    return design.X @ np.asarray(theta, float) + sigma * rng.standard_normal(design.n)


def draw_batch(design, theta, sigma, rng, m):
    """m replications as sufficient statistics (see module docstring)."""
    R = design.qr[1]
    mean = R @ np.asarray(theta, float)
    g = mean + sigma * rng.standard_normal((m, design.P))
    rss = sigma ** 2 * rng.chisquare(design.n - design.P, size=m)
    return SampleBatch(design, g, rss)


def simulate(design, theta, sigma, reps, master, grid_idx=0, *, block=20_000, threads=1):
    """``reps`` replications, concatenated in block order."""
    nblocks = -(-reps // block)
    sizes = [min(block, reps - b * block) for b in range(nblocks)]

    def one(b):
        return draw_batch(design, theta, sigma, block_rng(master, design.n, grid_idx, b), sizes[b])

    if threads > 1 and nblocks > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(one, range(nblocks)))
    else:
        parts = [one(b) for b in range(nblocks)]
    g = np.concatenate([p.g for p in parts])
    rss = np.concatenate([p.rss for p in parts])
    return SampleBatch(design, g, rss)


# ----------------------------------------------------------------- ledger

@dataclass(frozen=True)
class Estimate:
    """Relative frequency with binomial SE; ``count`` is the size of the conditioning cell."""

    value: float
    se: float
    count: int

    @property
    def empty(self):
        return self.count == 0

    @classmethod
    def of(cls, events):
        events = np.asarray(events, dtype=bool)
        m = events.size
        if m == 0:
            return cls(np.nan, np.nan, 0)
        f = float(events.mean())
        return cls(f, float(np.sqrt(f * (1 - f) / m)), m)


@dataclass(eq=False)
class ReplicationLedger:
    """Per-replication records for one (design, parameter point, rule)."""

    n: int
    master: int
    grid_idx: int
    block: int
    theta: np.ndarray
    sigma: float
    ts: np.ndarray                   # (T, k)
    selected: np.ndarray             # (m,) order p_hat, or index into ``masks``
    estimate: np.ndarray             # (m, P)
    target: np.ndarray               # (m, k)  sqrt(n) A (estimate - theta)
    masks: tuple | None = None
    estimators: dict = field(default_factory=dict)  # name -> (m, T)
    exact: np.ndarray | None = None  # (m, T) G(t | selected), nan where not computed

    def __len__(self):
        return self.selected.size

    def cell(self, p):
        if self.masks is not None and not np.isscalar(p):
            p = self.masks.index(tuple(int(v) for v in p))
        return self.selected == p

    def to_csv(self, fh):
        P = self.estimate.shape[1]
        k = self.target.shape[1]
        T = self.ts.shape[0]
        fh.write(f"# {LEDGER_SCHEMA} n={self.n} master_seed={self.master} "
                 f"grid={self.grid_idx} block={self.block}\n")
        w = csv.writer(fh, lineterminator="\n")
        head = ["rep", "block", "selected"]
        head += [f"estimate_{i + 1}" for i in range(P)]
        head += [f"target_{i + 1}" for i in range(k)]
        for name in self.estimators:
            head += [f"{name}_t{j}" for j in range(T)]
        if self.exact is not None:
            head += [f"G_t{j}" for j in range(T)]
        w.writerow(head)
        for i in range(len(self)):
            sel = self.selected[i]
            sel = "".join(map(str, self.masks[sel])) if self.masks is not None else int(sel)
            row = [i, i // self.block, sel]
            row += [repr(float(v)) for v in self.estimate[i]]
            row += [repr(float(v)) for v in self.target[i]]
            for arr in self.estimators.values():
                row += [repr(float(v)) for v in arr[i]]
            if self.exact is not None:
                row += [repr(float(v)) for v in self.exact[i]]
            w.writerow(row)


def exact_targets(design, A, theta, sigma, family, ts, quad=None, orders=None):
    """G_{n,theta,sigma}(t|p) for each order with non-negligible probability.

    Returns (table, probs): table[p] is a (T,) array (nan for negligible cells),
    probs the exact selection probabilities indexed by order.
    """
    quad = quad or QuadratureConfig()
    probs_o, _ = selection_probabilities(design, theta, sigma, family, quad)
    probs = np.full(family.P + 1, 0.0)
    probs[family.O:] = probs_o
    table = np.full((family.P + 1, np.asarray(ts).reshape(len(ts), -1).shape[0]), np.nan)
    for p in orders if orders is not None else range(family.O, family.P + 1):
        if probs[p] < MIN_COND_PROB:
            continue
        try:
            table[p] = cond_cdf_grid(design, A, theta, sigma, family, p, ts, quad,
                                     sel_prob=probs[p])[0]
        except ConditioningError:
            pass
    return table, probs


def run_ledger(design, theta, sigma, rule, A, ts, reps, master, grid_idx=0, *,
               estimators=("check",), exact=True, quad=None, s_np=None,
               aux_method="threshold", block=20_000, threads=1):
    """Simulate, select, estimate; one ledger row per replication."""
    A = A.A if isinstance(A, TargetMap) else np.atleast_2d(np.asarray(A, float))
    ts = np.asarray(ts, dtype=float).reshape(-1, A.shape[0])
    theta = np.asarray(theta, dtype=float)
    batch = simulate(design, theta, sigma, reps, master, grid_idx, block=block, threads=threads)
    est, sel = selected_estimates_batch(batch, rule)
    target = np.sqrt(design.n) * (est - theta) @ A.T
    nested = isinstance(rule, NestedFamily)
    led = ReplicationLedger(design.n, master, grid_idx, block, theta, float(sigma), ts, sel,
                            est, target, masks=None if nested else tuple(rule.masks))
    if nested:
        for name in estimators:
            if name == "check":
                led.estimators[name] = check_cdf_selected_batch(
                    batch, rule, A, ts, s_np=s_np, method=aux_method, p_hat=sel)
            elif name == "plugin_full":
                led.estimators[name] = plugin_phi_batch(batch, A, design.P, ts)
            else:
                raise ValueError(f"unknown estimator {name!r}")
        if exact:
            table, _ = exact_targets(design, A, theta, sigma, rule, ts, quad,
                                     orders=np.unique(sel))
            led.exact = table[sel]
    return led


def empirical_cond_cdf(ledger, p, t):
    """Fraction of the {selected = p} cell with target <= t; empty cells have count 0."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    rows = ledger.cell(p)
    return Estimate.of(np.all(ledger.target[rows] <= t, axis=1))


def error_prob(ledger, estimator, delta, *, t_index=0, p=None, target="G"):
    """Frequency of |estimator - target| > delta, optionally within the {selected = p} cell."""
    est = ledger.estimators[estimator][:, t_index]
    if target == "G":
        ref = ledger.exact[:, t_index]
    else:
        ref = ledger.estimators[target][:, t_index]
    rows = np.ones(len(ledger), dtype=bool) if p is None else ledger.cell(p)
    diff = np.abs(est[rows] - ref[rows])
    if np.any(np.isnan(diff)):
        raise ConditioningError("exact target missing for a realized cell")
    return Estimate.of(diff > delta)


# ----------------------------------------------------------------- plans

@dataclass(frozen=True, eq=False)
class ExperimentPlan:
    Q: np.ndarray
    ns: tuple
    theta: np.ndarray
    family: object
    A: np.ndarray
    ts: np.ndarray
    reps: int = 100_000
    seed: int = 0
    sigma: float = 1.0
    gamma_grid: np.ndarray | None = None
    rho0: float | None = None
    grid_points: int = 9
    p: int | None = None
    delta: float | None = None
    s_np: float | None = None
    aux_method: str = "threshold"
    design_seed: int = 0
    perturbation: np.ndarray | None = None
    block: int = 20_000
    threads: int = 1
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        A = self.A.A if isinstance(self.A, TargetMap) else np.atleast_2d(np.asarray(self.A, float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "ts", np.asarray(self.ts, dtype=float).reshape(-1, A.shape[0]))
        object.__setattr__(self, "ns", tuple(int(n) for n in self.ns))
        if self.reps < 1000:
            raise ValueError("replication count must be >= 1000")
        if self.theta.shape != (self.Q.shape[0],):
            raise ValueError("theta must have length P")

    @property
    def P(self):
        return self.Q.shape[0]

    def design(self, n):
        return DesignMatrix.synthetic(n, self.Q, seed=self.design_seed,
                                      perturbation=self.perturbation)


def q_star(Q, A, O, tol=1e-10):
    """Largest q > O with C_inf^(q) != 0, or None."""
    A = np.atleast_2d(A)
    scale = max(1.0, float(np.abs(A).max()))
    for q in range(Q.shape[0], O, -1):
        if np.max(np.abs(limit_quantities(Q, A, q).C)) > tol * scale:
            return q
    return None


def default_rho0(Q, sigma):
    return 4.0 * sigma * float(np.sqrt(np.max(np.diag(np.linalg.inv(Q)))))


def gamma_grid(P, coord, rho0, points=9):
    """``points`` values on coordinate ``coord`` (1-based), symmetric, including 0."""
    vals = np.linspace(-0.999 * rho0, 0.999 * rho0, points)
    vals[points // 2] = 0.0
    vals = 0.5 * (vals - vals[::-1])  # exact sign symmetry
    G = np.zeros((points, P))
    G[:, coord - 1] = vals
    return G


def limit_class(theta, p, O):
    base = max(order_of(theta), O)
    if p < base:
        raise ValueError("limit only defined for p >= max{p0(theta), O}")
    return AT if p == base else ABOVE


def oscillation_delta(plan, p, grid, t):
    """One quarter of the oscillation of the limit c.d.f. over the perturbation grid."""
    cls = limit_class(plan.theta, p, plan.family.O)
    vals = [limit_cdf(plan.Q, plan.A, plan.sigma, p, g, cls, t, plan.family, plan.quad).value
            for g in grid]
    return 0.25 * (max(vals) - min(vals)), np.array(vals)


# ----------------------------------------------------------------- experiments

def nonuniformity_sweep(plan, *, conditional=False):
    """Sup over the local grid of the error probability of the consistent estimator.

    Unconditional (target G(t|p_hat)) or conditional on {p_hat = p}. Returns a
    list of per-n rows.
    """
    fam = plan.family
    qs = q_star(plan.Q, plan.A, fam.O)
    if qs is None:
        raise ValueError("no order with asymptotic correlation; the sweep does not apply")
    p = plan.p if plan.p is not None else qs
    rho0 = plan.rho0 if plan.rho0 is not None else default_rho0(plan.Q, plan.sigma)
    grid = plan.gamma_grid if plan.gamma_grid is not None else gamma_grid(
        plan.P, qs, rho0, plan.grid_points)
    t = plan.ts[0]
    delta0, gvals = oscillation_delta(plan, p, grid, t)
    if plan.delta is not None:
        delta0 = plan.delta
    bound = lemma_c1_bound(fam, qs)
    rows = []
    for n in plan.ns:
        design = plan.design(n)
        best = None
        for j, g in enumerate(grid):
            vt = plan.theta + g / np.sqrt(n)
            led = run_ledger(design, vt, plan.sigma, fam, plan.A, plan.ts[:1], plan.reps,
                             plan.seed, j, s_np=plan.s_np, aux_method=plan.aux_method,
                             quad=plan.quad, block=plan.block, threads=plan.threads)
            e = error_prob(led, "check", delta0, p=p if conditional else None)
            if e.empty:
                continue
            if best is None or e.value > best[0].value:
                best = (e, j)
        if best is None:
            raise ConditioningError(f"every conditioning cell is empty at n={n}")
        e, j = best
        rows.append(dict(n=n, sup=e.value, se=e.se, count=e.count, argsup=j,
                         gamma=float(grid[j][qs - 1]), delta0=delta0, bound=bound,
                         q_star=qs, p=p))
    return rows


def consistency_curve(plan, delta=0.05, t_index=0):
    """Error probability of G_check(t|p_hat) against G(t|p_hat) at a fixed theta."""
    rows = []
    for n in plan.ns:
        led = run_ledger(plan.design(n), plan.theta, plan.sigma, plan.family, plan.A, plan.ts,
                         plan.reps, plan.seed, 0, s_np=plan.s_np, aux_method=plan.aux_method,
                         quad=plan.quad, block=plan.block, threads=plan.threads)
        e = error_prob(led, "check", delta, t_index=t_index)
        rows.append(dict(n=n, value=e.value, se=e.se, count=e.count))
    return rows


def orthogonal_probe(plan, thetas, delta=0.05):
    """Per n: max over theta of the frequency of sup_t |Phi_hat_{n,P}(t) - G(t|p_hat)| > delta."""
    rows = []
    for n in plan.ns:
        design = plan.design(n)
        best = None
        for j, th in enumerate(thetas):
            led = run_ledger(design, th, plan.sigma, plan.family, plan.A, plan.ts, plan.reps,
                             plan.seed, j, estimators=("plugin_full",), quad=plan.quad,
                             block=plan.block, threads=plan.threads)
            dev = np.max(np.abs(led.estimators["plugin_full"] - led.exact), axis=1)
            e = Estimate.of(dev > delta)
            if best is None or e.value > best[0].value:
                best = (e, j)
        e, j = best
        rows.append(dict(n=n, value=e.value, se=e.se, argmax=j))
    return rows


def prop_a2_probe(plan, p, grid_fn):
    """Per n: min over the grid of the empirical P(p_hat = p).

    ``grid_fn(n)`` returns the parameter points (rows) for sample size n.
    """
    from .selection import gts_select_batch

    rows = []
    for n in plan.ns:
        design = plan.design(n)
        best = None
        for j, th in enumerate(grid_fn(n)):
            batch = simulate(design, th, plan.sigma, plan.reps, plan.seed, j,
                             block=plan.block, threads=plan.threads)
            e = Estimate.of(gts_select_batch(batch, plan.family) == p)
            exact, _ = selection_probabilities(design, th, plan.sigma, plan.family, plan.quad)
            if best is None or e.value < best[0].value:
                best = (e, j, float(exact[p - plan.family.O]))
        e, j, ex = best
        rows.append(dict(n=n, value=e.value, se=e.se, argmin=j, exact=ex))
    return rows


def sup_cdf_gap(ledger, cell, exact_vals):
    """sup over the ledger's t-grid of |empirical c.d.f. in the cell - exact values|.

    Returns (count, gap, se) with se the largest binomial SE at the exact values.
    """
    count = int(np.count_nonzero(ledger.cell(cell)))
    if count == 0:
        return 0, np.nan, np.nan
    gaps = [abs(empirical_cond_cdf(ledger, cell, t).value - exact_vals[j])
            for j, t in enumerate(ledger.ts)]
    g = np.clip(np.asarray(exact_vals, float), 0.0, 1.0)
    return count, float(max(gaps)), float(np.sqrt(np.max(g * (1 - g)) / count))


def thm45_reduction_run(plan, rule, c):
    """Compare a subset selector with the nested threshold procedure it reduces to.

    ``plan.theta`` must have a zero last coordinate and no other zeros, and
    the rule must contain r_* = (1, ..., 1, 0).
    """
    P = plan.P
    th = plan.theta
    if th[-1] != 0 or np.any(th[:-1] == 0):
        raise ValueError("theta must be nonzero except for its last coordinate")
    r_star = (1,) * (P - 1) + (0,)
    if r_star not in tuple(rule.masks):
        raise ValueError("rule must contain the mask dropping the last regressor")
    nested = NestedFamily(P - 1, (c,))
    ref = 2.0 * ndtr(-c)
    rows = []
    for n in plan.ns:
        design = plan.design(n)
        batch = simulate(design, th, plan.sigma, plan.reps, plan.seed, 0,
                         block=plan.block, threads=plan.threads)
        (f_full, se_full), (f_star, se_star) = condition24_probe(batch, rule, r_star, c)
        led = run_ledger(design, th, plan.sigma, rule, plan.A, plan.ts, plan.reps, plan.seed, 0,
                         exact=False, block=plan.block, threads=plan.threads)
        table, _ = exact_targets(design, plan.A, th, plan.sigma, nested, plan.ts, plan.quad)
        cnt_full, gap_full, se_gfull = sup_cdf_gap(led, (1,) * P, table[P])
        cnt_star, gap_star, se_gstar = sup_cdf_gap(led, r_star, table[P - 1])
        sel_full = Estimate.of(led.cell((1,) * P))
        rows.append(dict(n=n, symdiff_full=f_full, symdiff_full_se=se_full,
                         symdiff_star=f_star, symdiff_star_se=se_star,
                         gap_full=gap_full, gap_full_se=se_gfull, gap_full_count=cnt_full,
                         gap_star=gap_star, gap_star_se=se_gstar, gap_star_count=cnt_star,
                         freq_full=sel_full.value, freq_full_se=sel_full.se, freq_full_ref=ref))
    return rows


def decreasing_within_noise(values, ses, band=2.0):
    """Each step may rise by at most ``band`` combined SEs, and the last value is below the first."""
    v = np.asarray(values, float)
    s = np.asarray(ses, float)
    steps = all(v[i + 1] <= v[i] + band * np.hypot(s[i], s[i + 1]) for i in range(v.size - 1))
    return bool(steps and v[-1] < v[0])


def rows_to_csv(rows, fh, schema=SUMMARY_SCHEMA, meta=""):
    fh.write(f"# {schema}{(' ' + meta) if meta else ''}\n")
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                    for k, v in r.items()})


def rows_to_text(rows, **kw):
    buf = io.StringIO()
    rows_to_csv(rows, buf, **kw)
    return buf.getvalue()


__all__ = [
    "block_rng", "draw_sample", "draw_batch", "simulate", "Estimate", "ReplicationLedger",
    "exact_targets", "run_ledger", "empirical_cond_cdf", "error_prob", "ExperimentPlan",
    "q_star", "default_rho0", "gamma_grid", "limit_class", "oscillation_delta",
    "nonuniformity_sweep", "consistency_curve", "orthogonal_probe", "prop_a2_probe",
    "sup_cdf_gap", "thm45_reduction_run", "decreasing_within_noise", "rows_to_csv",
    "rows_to_text", "SubsetFamily", "ThresholdRule",
]
