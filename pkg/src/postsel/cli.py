"""Command-line front end.

    postsel exact   --config CFG [--seed S] [--out DIR] [--threads N] [--svg]
    postsel sweep   --config CFG --experiment NAME [...]
    postsel probe24 --config CFG [...]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 empty conditioning cell.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._special import delta as delta_fn
from .cond_dist import (ABOVE, AT, QuadratureConfig, cond_cdf_grid, limit_cdf, limit_cdf_mc,
                        lemma_c1_bound, selection_probabilities)
from .config import ConfigError, load_config
from .errors import ConditioningError, ToleranceError
from .montecarlo import (Estimate, ExperimentPlan, consistency_curve, empirical_cond_cdf,
                         exact_targets, limit_class, nonuniformity_sweep, orthogonal_probe,
                         prop_a2_probe, rows_to_csv, run_ledger, thm45_reduction_run)
from .regression import asymptotic_variance_terms, finite_quantities, limit_quantities
from .selection import NestedFamily, SubsetFamily, ThresholdRule

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_EMPTY = 0, 2, 3, 4

SWEEPS = ("thm2.3", "thm4.1", "thm4.2", "consistency", "prop2.4", "prop-a2a", "prop-a2b",
          "lemma-c1", "prop-a1", "limit-oracle", "invariants")


def _nested(cfg):
    if not isinstance(cfg.family, NestedFamily):
        raise ConfigError("this command needs a nested family", field="family.type")
    return cfg.family


def _ts(cfg):
    if "t" not in cfg.grids:
        raise ConfigError("missing required field", field="grids.t")
    return cfg.grids["t"]


def plan_from(cfg, **kw):
    return ExperimentPlan(
        Q=cfg.design.Q, ns=cfg.design.ns, theta=cfg.theta, family=cfg.family, A=cfg.A,
        ts=kw.pop("ts", cfg.grids.get("t", np.zeros((1, cfg.A.shape[0])))), reps=cfg.reps,
        seed=cfg.seed, sigma=cfg.sigma, gamma_grid=_opt_matrix(cfg.grids.get("gamma")),
        rho0=cfg.grids.get("rho0"), grid_points=int(cfg.grids.get("points", 9)), p=cfg.p,
        delta=cfg.grids.get("delta0"), s_np=cfg.grids.get("s_np"),
        aux_method=cfg.grids.get("aux", "threshold"), design_seed=cfg.design.seed,
        perturbation=cfg.design.perturbation, block=cfg.block, threads=cfg.threads,
        quad=cfg.quad, **kw)


def _opt_matrix(v):
    return None if v is None else np.atleast_2d(np.asarray(v, dtype=float))


# ----------------------------------------------------------------- exact

def run_exact(cfg):
    """Rows of G(t|p), selection probabilities and limits; MC columns if ``mc.validate``."""
    fam = _nested(cfg)
    ts = _ts(cfg)
    validate = bool(cfg.raw.get("mc", {}).get("validate", False))
    k = cfg.A.shape[0]
    cdf_rows, sel_rows = [], []
    for n in cfg.design.ns:
        design = cfg.design.design(n)
        table, probs = exact_targets(design, cfg.A, cfg.theta, cfg.sigma, fam, ts, cfg.quad)
        led = None
        if validate:
            led = run_ledger(design, cfg.theta, cfg.sigma, fam, cfg.A, ts, cfg.reps, cfg.seed,
                             estimators=(), exact=False, block=cfg.block, threads=cfg.threads)
        for p in range(fam.O, fam.P + 1):
            row = dict(n=n, p=p, prob=float(probs[p]))
            if led is not None:
                e = Estimate.of(led.selected == p)
                se = np.sqrt(probs[p] * (1 - probs[p]) / len(led))
                row.update(freq=e.value, freq_se=float(se))
            sel_rows.append(row)
            if probs[p] >= 1e-10:
                vals, errs, method = cond_cdf_grid(design, cfg.A, cfg.theta, cfg.sigma, fam, p,
                                                   ts, cfg.quad, sel_prob=probs[p])
            else:
                vals = errs = np.full(len(ts), np.nan)
                method = "negligible-cell"
            lim = _limit_row_values(cfg, p, ts)
            for j, t in enumerate(ts):
                row = dict(n=n, p=p)
                row.update({f"t{i + 1}" if k > 1 else "t": float(t[i]) for i in range(k)})
                row.update(value=float(np.clip(vals[j], 0, 1)), error=float(errs[j]),
                           method=method, limit=lim[j])
                if led is not None:
                    e = empirical_cond_cdf(led, p, t)
                    g = vals[j]
                    se = np.sqrt(g * (1 - g) / e.count) if e.count else np.nan
                    row.update(empirical=e.value, empirical_se=float(se), count=e.count)
                cdf_rows.append(row)
    return {"cdf": cdf_rows, "selprob": sel_rows}


def _limit_row_values(cfg, p, ts):
    try:
        cls = limit_class(cfg.theta, p, cfg.family.O)
    except ValueError:
        return [float("nan")] * len(ts)
    zero = np.zeros(cfg.P)
    return [limit_cdf(cfg.design.Q, cfg.A, cfg.sigma, p, zero, cls, t, cfg.family,
                      cfg.quad).value for t in ts]


# ----------------------------------------------------------------- sweeps

def _prop_a2_grids(cfg, part):
    spec = cfg.grids.get("prop_a2")
    if spec is None:
        raise ConfigError("missing required field", field="grids.prop_a2")
    p = int(spec.get("p", cfg.p if cfg.p is not None else cfg.P - 1))
    base = np.asarray(spec.get("base", cfg.theta), dtype=float)
    P = cfg.P
    if part == "a":
        levels = spec.get("levels", [base[p - 1]])
        coefs = spec.get("coefs_a", [-0.99, -0.5, 0.0, 0.5, 0.99])

        def grid(n):
            r = 1.0 / np.sqrt(n)
            out = []
            for lv in levels:
                for c in coefs:
                    th = base.copy()
                    th[p - 1] = lv
                    th[p:] = 0.0
                    th[P - 1] += c * r
                    out.append(th)
            return np.array(out)
    else:
        coefs = spec.get("coefs_b", [-0.5, -0.25, 0.0, 0.25, 0.5])

        def grid(n):
            r = n ** -0.25
            out = []
            for c in coefs:
                th = base.copy()
                th[P - 1] += c * r
                out.append(th)
            return np.array(out)
    return p, grid


def _lemma_c1(cfg):
    fam = _nested(cfg)
    p = cfg.p if cfg.p is not None else fam.P
    bound = lemma_c1_bound(fam, p)
    rows = []
    for n in cfg.design.ns:
        probs, err = selection_probabilities(cfg.design.design(n), cfg.theta, cfg.sigma, fam,
                                             cfg.quad)
        v = float(probs[p - fam.O])
        rows.append(dict(n=n, p=p, prob=v, error=float(err[p - fam.O]), bound=bound,
                         gap=abs(v - bound)))
    return rows


def _prop_a1(cfg):
    fam = _nested(cfg)
    p = cfg.p if cfg.p is not None else fam.P
    gamma = np.asarray(cfg.grids.get("gamma_fixed", np.zeros(cfg.P)), dtype=float)
    ts = _ts(cfg)
    cls = limit_class(cfg.theta, p, fam.O)
    lim = np.array([limit_cdf(cfg.design.Q, cfg.A, cfg.sigma, p, gamma, cls, t, fam,
                              cfg.quad).value for t in ts])
    rows = []
    for n in cfg.design.ns:
        design = cfg.design.design(n)
        vt = cfg.theta + gamma / np.sqrt(n)
        vals, errs, _ = cond_cdf_grid(design, cfg.A, vt, cfg.sigma, fam, p, ts, cfg.quad)
        rows.append(dict(n=n, p=p, sup_gap=float(np.max(np.abs(vals - lim))),
                         quad_error=float(np.max(errs))))
    return rows


def _limit_oracle(cfg):
    fam = _nested(cfg)
    spec = cfg.grids.get("oracle", {})
    count = int(spec.get("queries", 10))
    rng = np.random.default_rng(int(spec.get("seed", cfg.seed)))
    P, O = cfg.P, fam.O
    k = cfg.A.shape[0]
    rows = []
    for i in range(count):
        M = rng.standard_normal((P, P))
        Q = M @ M.T / P + 0.5 * np.eye(P)
        A = rng.standard_normal((k, P))
        gam = 2.0 * rng.standard_normal(P)
        t = rng.standard_normal(k)
        cls = ABOVE if i % 2 else AT
        p = int(rng.integers(O + 1, P + 1)) if cls == ABOVE else int(rng.integers(max(O, 1), P + 1))
        ex = limit_cdf(Q, A, cfg.sigma, p, gam, cls, t, fam, cfg.quad)
        mc, se, acc = limit_cdf_mc(Q, A, cfg.sigma, p, gam, cls, t, fam,
                                   seed=cfg.seed * 1000 + i, reps=cfg.reps)
        ref_se = float(np.sqrt(ex.value * (1 - ex.value) / acc))
        z = (mc - ex.value) / ref_se if ref_se > 0 else (0.0 if mc == ex.value else np.inf)
        rows.append(dict(query=i, cls=cls, p=p, exact=ex.value, exact_error=ex.error,
                         mc=mc, se=ref_se, accepted=acc, z=float(z)))
    return rows


def _invariants(cfg):
    rows = []

    def add(name, ok, detail=""):
        if isinstance(detail, (np.ndarray, tuple, list)):
            detail = " ".join(f"{float(v):.6g}" for v in np.ravel(detail))
        elif isinstance(detail, (float, np.floating)):
            detail = f"{float(detail):.6g}"
        rows.append(dict(check=name, passed=bool(ok), detail=str(detail)))

    # Delta conventions
    add("delta(s, +inf, b) = 0", delta_fn(1.3, np.inf, 2.0) == 0 and delta_fn(1.3, -np.inf, 2.0) == 0)
    add("delta(0, a, b) is an indicator", delta_fn(0, 0.5, 1) == 1 and delta_fn(0, 2, 1) == 0)
    a = np.linspace(-5, 5, 41)
    add("delta symmetric in a", np.array_equal(delta_fn(0.7, a, 1.1), delta_fn(0.7, -a, 1.1)))
    add("delta(s, a, b <= 0) = 0", delta_fn(1.0, 0.3, 0.0) == 0 and delta_fn(1.0, 0.3, -1) == 0)

    fam = _nested(cfg)
    ts = _ts(cfg)
    design = cfg.design.design(cfg.design.ns[0])
    table, probs = exact_targets(design, cfg.A, cfg.theta, cfg.sigma, fam, ts, cfg.quad)
    add("selection probabilities sum to 1", abs(probs.sum() - 1) < 1e-6, probs.sum())
    big = 10 * cfg.sigma * np.sqrt(np.max(np.diag(np.linalg.inv(design.gram))))
    for p in range(fam.O, fam.P + 1):
        if probs[p] < 1e-10:
            continue
        v = table[p]
        add(f"G(.|{p}) monotone on t-grid", np.all(np.diff(v) >= -1e-9), v)
        lo, hi, _ = cond_cdf_grid(design, cfg.A, cfg.theta, cfg.sigma, fam, p,
                                  np.array([[-big], [big]]) if cfg.A.shape[0] == 1
                                  else np.array([[-big] * cfg.A.shape[0], [big] * cfg.A.shape[0]]),
                                  cfg.quad, sel_prob=probs[p])
        add(f"G(.|{p}) limits", lo[0] <= 1e-3 and lo[1] >= 0.999, (lo[0], lo[1]))
    # minimal order: closed form vs the s-integral (asserted inside cond_cdf_grid)
    try:
        cond_cdf_grid(design, cfg.A, cfg.theta, cfg.sigma, fam, fam.O, ts, cfg.quad)
        add("minimal-order c.d.f. equals the Gaussian c.d.f.", True)
    except ToleranceError as e:
        add("minimal-order c.d.f. equals the Gaussian c.d.f.", False, e)
    # zeta identity and the equivalence on several designs
    designs = cfg.grids.get("designs") or [cfg.design.Q.tolist()]
    for idx, Qd in enumerate(designs):
        Qd = np.asarray(Qd, dtype=float)
        for p in range(1, Qd.shape[0] + 1):
            lq = limit_quantities(Qd, cfg.A, p)
            pinv = np.linalg.pinv(lq.cov, rcond=1e-12, hermitian=True)
            resid = lq.zeta2 + lq.C @ pinv @ lq.C - lq.xi ** 2
            add(f"design {idx}: zeta identity p={p}", abs(resid) <= 1e-10 * max(1, lq.xi ** 2),
                resid)
        terms = asymptotic_variance_terms(Qd, cfg.A, cfg.sigma)
        total = sum(terms)
        for p in range(1, Qd.shape[0]):
            zero_tail = all(np.max(np.abs(limit_quantities(Qd, cfg.A, q).C)) <= 1e-10
                            for q in range(p + 1, Qd.shape[0] + 1))
            same = np.allclose(sum(terms[:p]), total, rtol=0, atol=1e-10)
            add(f"design {idx}: tail correlation vanishes iff variances agree (p={p})",
                zero_tail == same, (zero_tail, same))
        # the variance decomposition itself
        lq = limit_quantities(Qd, cfg.A, Qd.shape[0])
        add(f"design {idx}: variance decomposition",
            np.allclose(total, cfg.sigma ** 2 * lq.cov, atol=1e-10))
    fq = finite_quantities(design, cfg.A, fam.P)
    add("finite-n zeta nonnegative", fq.zeta2 >= 0)
    return rows


def run_sweep(cfg, experiment):
    if experiment not in SWEEPS:
        raise ConfigError(f"unknown experiment {experiment!r}", field="experiment")
    if experiment == "thm2.3":
        return nonuniformity_sweep(plan_from(cfg))
    if experiment in ("thm4.1", "thm4.2"):
        return nonuniformity_sweep(plan_from(cfg), conditional=True)
    if experiment == "consistency":
        return consistency_curve(plan_from(cfg), delta=float(cfg.grids.get("delta", 0.05)))
    if experiment == "prop2.4":
        thetas = _opt_matrix(cfg.grids.get("thetas"))
        if thetas is None:
            raise ConfigError("missing required field", field="grids.thetas")
        return orthogonal_probe(plan_from(cfg), thetas, delta=float(cfg.grids.get("delta", 0.05)))
    if experiment in ("prop-a2a", "prop-a2b"):
        p, grid = _prop_a2_grids(cfg, experiment[-1])
        return prop_a2_probe(plan_from(cfg), p, grid)
    if experiment == "lemma-c1":
        return _lemma_c1(cfg)
    if experiment == "prop-a1":
        return _prop_a1(cfg)
    if experiment == "limit-oracle":
        return _limit_oracle(cfg)
    return _invariants(cfg)


def run_probe24(cfg):
    fam = cfg.family
    if not isinstance(fam, (SubsetFamily, ThresholdRule)):
        raise ConfigError("probe24 needs a subset or threshold selector", field="family.type")
    c = float(cfg.grids.get("c", np.sqrt(fam.upsilon) if isinstance(fam, SubsetFamily) else fam.c))
    return thm45_reduction_run(plan_from(cfg), fam, c)


# ----------------------------------------------------------------- output

PLOT_COLUMNS = {
    "thm2.3": (("sup", "se"), ("bound", None)),
    "thm4.1": (("sup", "se"),),
    "thm4.2": (("sup", "se"),),
    "consistency": (("value", "se"),),
    "prop2.4": (("value", "se"),),
    "prop-a2a": (("value", "se"), ("exact", None)),
    "prop-a2b": (("value", "se"), ("exact", None)),
    "lemma-c1": (("gap", None),),
    "prop-a1": (("sup_gap", None),),
    "probe24": (("symdiff_full", "symdiff_full_se"), ("symdiff_star", "symdiff_star_se"),
                ("gap_full", "gap_full_se"), ("gap_star", "gap_star_se")),
}


def write_svg(rows, name, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "postsel"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = [r["n"] for r in rows]
    for col, se in PLOT_COLUMNS.get(name, ()):
        y = [r[col] for r in rows]
        err = [r[se] for r in rows] if se else None
        ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=col)
    ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_title(name)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _emit(out, stem, rows, meta, svg_name=None):
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}.csv"
    with open(path, "w", newline="") as fh:
        rows_to_csv(rows, fh, meta=meta)
    if svg_name is not None and rows and "n" in rows[0]:
        write_svg(rows, svg_name, out / f"{stem}.svg")
    return path


def build_parser():
    ap = argparse.ArgumentParser(prog="postsel", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("exact", "sweep", "probe24"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides mc.seed)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads for replication blocks")
        sp.add_argument("--svg", action="store_true", help="also write SVG plots")
        if name == "sweep":
            sp.add_argument("--experiment", choices=SWEEPS,
                            help="experiment (defaults to the config's 'experiment')")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, threads=args.threads)
        meta = f"seed={cfg.seed} config={Path(args.config).name}"
        if args.command == "exact":
            res = run_exact(cfg)
            for key, rows in res.items():
                print(_emit(out, f"exact_{key}", rows, meta))
        elif args.command == "sweep":
            exp = args.experiment or cfg.experiment
            if exp is None:
                raise ConfigError("no experiment given", field="experiment")
            rows = run_sweep(cfg, exp)
            stem = "sweep_" + exp.replace(".", "_").replace("-", "_")
            print(_emit(out, stem, rows, meta, exp if args.svg else None))
        else:
            rows = run_probe24(cfg)
            print(_emit(out, "probe24", rows, meta, "probe24" if args.svg else None))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConditioningError as e:
        print(f"empty conditioning cell: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (ToleranceError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
