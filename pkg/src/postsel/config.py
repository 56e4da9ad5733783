"""Experiment configuration: a JSON document with sections
``design``, ``family``, ``target``, ``grids`` and ``mc``.

Validation errors raise :class:`~postsel.errors.ConfigError` carrying the
dotted path of the offending field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .cond_dist import QuadratureConfig
from .errors import ConfigError
from .regression import DesignMatrix, SingularDesignError, TargetMap
from .selection import NestedFamily, SubsetFamily, ThresholdRule

SECTIONS = ("design", "family", "target", "grids", "mc")


def shipped_configs():
    """Names of the default configs bundled with the package."""
    root = resources.files("postsel") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def shipped_path(name):
    return Path(str(resources.files("postsel") / "configs" / name))


def _get(d, key, path, *, default=..., kind=None):
    if key not in d:
        if default is ...:
            raise ConfigError("missing required field", field=f"{path}.{key}")
        return default
    v = d[key]
    if kind is not None and v is not None and not isinstance(v, kind):
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}", field=f"{path}.{key}")
    return v


def _matrix(v, field, shape=None):
    try:
        a = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("not a numeric array", field=field) from None
    if shape is not None and a.shape != shape:
        raise ConfigError(f"expected shape {shape}, got {a.shape}", field=field)
    if not np.all(np.isfinite(a)):
        raise ConfigError("non-finite entries", field=field)
    return a


@dataclass(frozen=True, eq=False)
class DesignSpec:
    Q: np.ndarray
    ns: tuple
    seed: int = 0
    perturbation: np.ndarray | None = None
    X_csv: str | None = None
    Q_csv: str | None = None

    @property
    def P(self):
        return self.Q.shape[0]

    def design(self, n):
        if self.X_csv is not None:
            d = DesignMatrix.from_csv(self.X_csv, self.Q_csv)
            if d.n != n:
                raise ConfigError(f"CSV design has n={d.n}", field="design.n")
            return d
        return DesignMatrix.synthetic(n, self.Q, seed=self.seed, perturbation=self.perturbation)


@dataclass(frozen=True, eq=False)
class Config:
    raw: dict
    design: DesignSpec
    family: object
    A: np.ndarray
    theta: np.ndarray
    sigma: float
    p: int | None
    grids: dict
    reps: int
    seed: int
    block: int
    threads: int
    quad: QuadratureConfig
    experiment: str | None

    @property
    def P(self):
        return self.design.P

    def with_overrides(self, *, seed=None, threads=None):
        kw = dict(self.__dict__)
        if seed is not None:
            kw["seed"] = int(seed)
            kw["quad"] = QuadratureConfig(**{**self.quad.__dict__, "seed": int(seed)})
        if threads is not None:
            kw["threads"] = int(threads)
        return Config(**kw)


def _design(d):
    path = "design"
    if not isinstance(d, dict):
        raise ConfigError("section must be an object", field=path)
    ns = _get(d, "n", path)
    ns = tuple(int(v) for v in np.atleast_1d(ns))
    if not ns or any(v < 2 for v in ns):
        raise ConfigError("sample sizes must be integers >= 2", field=f"{path}.n")
    X_csv = _get(d, "csv", path, default=None, kind=str)
    Q_csv = _get(d, "q_csv", path, default=None, kind=str)
    if "Q" in d:
        Q = _matrix(d["Q"], f"{path}.Q")
    elif "equicorrelation" in d:
        P = int(_get(d, "P", path))
        r = float(d["equicorrelation"])
        Q = np.full((P, P), r) + (1 - r) * np.eye(P)
    elif "orthogonal" in d:
        Q = np.eye(int(d["orthogonal"]))
    elif X_csv is not None:
        Q = DesignMatrix.from_csv(X_csv, Q_csv).Q_limit
    else:
        raise ConfigError("need one of Q, equicorrelation, orthogonal or csv", field=f"{path}.Q")
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ConfigError("Q must be square", field=f"{path}.Q")
    pert = d.get("perturbation")
    if pert is not None:
        pert = _matrix(pert, f"{path}.perturbation", Q.shape)
    spec = DesignSpec(Q, ns, int(d.get("seed", 0)), pert, X_csv, Q_csv)
    try:
        for n in ns:
            if n <= spec.P:
                raise ConfigError(f"n={n} must exceed P={spec.P}", field=f"{path}.n")
        if X_csv is None:
            spec.design(ns[0])
    except SingularDesignError as e:
        raise ConfigError(str(e), field=f"{path}.Q") from None
    return spec


def _family(d, P):
    path = "family"
    if not isinstance(d, dict):
        raise ConfigError("section must be an object", field=path)
    kind = _get(d, "type", path, kind=str)
    try:
        if kind == "nested":
            O = int(_get(d, "O", path))
            c = _get(d, "c", path)
            c = [float(c)] * (P - O) if np.isscalar(c) else [float(v) for v in c]
            fam = NestedFamily(O, tuple(c))
        elif kind in ("subsets", "aic"):
            masks = _get(d, "masks", path, default="all")
            ups = float(d.get("upsilon", 2.0))
            fam = (SubsetFamily.all_subsets(P, ups) if masks == "all"
                   else SubsetFamily(tuple(map(tuple, masks)), ups))
        elif kind == "threshold":
            fam = ThresholdRule(tuple(_get(d, "r_star", path)), float(_get(d, "c", path)))
        else:
            raise ConfigError(f"unknown selector {kind!r}", field=f"{path}.type")
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e), field=path) from None
    if fam.P != P:
        raise ConfigError(f"family has P={fam.P}, design has P={P}", field=path)
    return fam


def load_config(source):
    """Parse a path, JSON string or dict into a :class:`Config`."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else source
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}",
                              field="<file>") from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", field="<file>")
    for s in ("design", "family", "target"):
        if s not in raw:
            raise ConfigError("missing required section", field=s)
    unknown = set(raw) - set(SECTIONS) - {"experiment", "description"}
    if unknown:
        raise ConfigError("unknown section", field=sorted(unknown)[0])

    design = _design(raw["design"])
    P = design.P
    family = _family(raw["family"], P)

    tg = raw["target"]
    A = _matrix(_get(tg, "A", "target"), "target.A")
    A = np.atleast_2d(A)
    try:
        TargetMap(A)
    except ValueError as e:
        raise ConfigError(str(e), field="target.A") from None
    if A.shape[1] != P:
        raise ConfigError(f"A must have P={P} columns", field="target.A")
    theta = _matrix(_get(tg, "theta", "target"), "target.theta", (P,))
    sigma = float(tg.get("sigma", 1.0))
    if not (np.isfinite(sigma) and sigma > 0):
        raise ConfigError("sigma must be positive", field="target.sigma")
    p = tg.get("p")

    grids = raw.get("grids", {})
    if "t" in grids:
        grids = dict(grids)
        grids["t"] = _matrix(grids["t"], "grids.t").reshape(-1, A.shape[0])

    mc = raw.get("mc", {})
    reps = int(mc.get("reps", 100_000))
    if reps < 1000:
        raise ConfigError("replication count must be >= 1000", field="mc.reps")
    qd = mc.get("quadrature", {})
    try:
        quad = QuadratureConfig(seed=int(mc.get("seed", 0)), **qd)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), field="mc.quadrature") from None
    return Config(raw=raw, design=design, family=family, A=A, theta=theta, sigma=sigma,
                  p=None if p is None else int(p), grids=grids, reps=reps,
                  seed=int(mc.get("seed", 0)), block=int(mc.get("block", 20_000)),
                  threads=int(mc.get("threads", 1)), quad=quad,
                  experiment=raw.get("experiment"))
