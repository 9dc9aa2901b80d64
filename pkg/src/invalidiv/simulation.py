"""Synthetic data for every model family, an identification oracle, and a replication engine."""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import IVDataset
from .errors import InvalidScenario

FAMILIES = ("linear", "local_violation", "nonlinear", "hetero_genius", "misteri")
DEFAULT_CONFOUNDING = 0.6
GAMMA_RANGE = (0.3, 0.6)
RATIO_TOL = 1e-9
MAX_ORACLE_P = 12


@dataclass(frozen=True)
class SimScenario:
    """Declarative description of one data-generating process.

    ``pi_spec`` takes one of three forms:

    * ``{"invalid": [j, ...], "magnitude": m}`` with ``m`` a scalar or one
      value per listed index;
    * ``{"C": [c_1, ..., c_p]}`` giving ``pi = C / sqrt(n)``;
    * ``{"orthogonal": True, "norm": s}`` drawing ``pi`` orthogonal to
      ``gamma`` with Euclidean norm ``s``.

    ``extras`` holds family-specific settings: ``form`` and ``strength``
    for ``nonlinear``; ``theta`` for ``hetero_genius``; ``beta0``,
    ``alpha``, ``eta0``, ``eta`` and ``gamma0`` for ``misteri``.
    """

    family: str = "linear"
    n: int = 1000
    p: int = 5
    beta: float = 1.0
    gamma: tuple | None = None
    pi_spec: dict = field(default_factory=dict)
    confounding: float = DEFAULT_CONFOUNDING
    extras: dict = field(default_factory=dict)
    seed: int = 0
    instrument_dist: str = "normal"
    noiseless: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidScenario(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.p < 1 or self.n < self.p + 2:
            raise InvalidScenario("need p >= 1 and n >= p + 2")
        if not -1 < self.confounding < 1:
            raise InvalidScenario("confounding must lie in (-1, 1)")
        if self.instrument_dist not in ("normal", "rademacher"):
            raise InvalidScenario("instrument_dist must be 'normal' or 'rademacher'")
        if self.gamma is not None:
            g = tuple(float(x) for x in np.ravel(self.gamma))
            if len(g) != self.p:
                raise InvalidScenario(f"gamma has {len(g)} entries, p = {self.p}")
            object.__setattr__(self, "gamma", g)
        keys = set(self.pi_spec)
        if keys and not (keys <= {"invalid", "magnitude"} or keys == {"C"} or keys <= {"orthogonal", "norm"}):
            raise InvalidScenario(f"unrecognised pi_spec keys {sorted(keys)}")
        if "invalid" in self.pi_spec:
            idx = list(self.pi_spec["invalid"])
            if any(not 0 <= int(j) < self.p for j in idx) or len(set(idx)) != len(idx):
                raise InvalidScenario("pi_spec invalid indices must be distinct and in 0..p-1")
        if "C" in self.pi_spec and len(self.pi_spec["C"]) != self.p:
            raise InvalidScenario("pi_spec C must have p entries")

    def resolved(self) -> SimScenario:
        """Copy with ``gamma`` fixed (drawn from ``seed`` when absent)."""
        if self.gamma is not None:
            return self
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x6A]))
        return replace(self, gamma=tuple(rng.uniform(*GAMMA_RANGE, size=self.p)))

    def true_pi(self) -> np.ndarray:
        spec = self.pi_spec
        pi = np.zeros(self.p)
        if "invalid" in spec:
            idx = [int(j) for j in spec["invalid"]]
            mag = np.broadcast_to(np.asarray(spec.get("magnitude", 1.0), dtype=float), (len(idx),))
            pi[idx] = mag
        elif "C" in spec:
            pi = np.asarray(spec["C"], dtype=float) / math.sqrt(self.n)
        elif spec.get("orthogonal"):
            g = np.asarray(self.resolved().gamma)
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x0F]))
            x = rng.normal(size=self.p)
            x -= g * (x @ g) / (g @ g)
            if self.p < 2 or np.linalg.norm(x) == 0:
                raise InvalidScenario("an orthogonal violation needs p >= 2")
            pi = x * float(spec.get("norm", 1.0)) / np.linalg.norm(x)
        return pi

    @property
    def valid_set(self):
        return tuple(int(j) for j in np.flatnonzero(self.true_pi() == 0))

    @property
    def regime(self):
        """``majority``, ``plurality`` or ``none`` from the implied ratio groups."""
        pi = self.true_pi()
        g = np.asarray(self.resolved().gamma)
        V = np.flatnonzero(pi == 0).size
        if V > self.p / 2:
            return "majority"
        groups = {}
        for c in pi[pi != 0] / g[pi != 0]:
            key = round(float(c), 9)
            groups[key] = groups.get(key, 0) + 1
        return "plurality" if V > max(groups.values(), default=0) else "none"


@dataclass(frozen=True)
class Truth:
    beta: float
    pi: np.ndarray
    gamma: np.ndarray
    valid_set: tuple[int, ...]


def _instruments(rng, n, p, dist):
    if dist == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=(n, p))
    return rng.standard_normal((n, p))


def _errors(rng, n, rho, noiseless):
    if noiseless:
        return np.zeros(n), np.zeros(n)
    e = rng.standard_normal((n, 2))
    return e[:, 0], rho * e[:, 0] + math.sqrt(1 - rho**2) * e[:, 1]


def generate(scenario: SimScenario) -> tuple[IVDataset, Truth]:
    """Draw one dataset and its ground truth from ``scenario``."""
    sc = scenario.resolved()
    rng = np.random.default_rng(sc.seed)
    n, p = sc.n, sc.p
    gamma = np.asarray(sc.gamma)
    pi = sc.true_pi()
    Z = _instruments(rng, n, p, sc.instrument_dist)
    ex = sc.extras
    if sc.family in ("linear", "local_violation"):
        delta, eps = _errors(rng, n, sc.confounding, sc.noiseless)
        D = Z @ gamma + delta
        Y = sc.beta * D + Z @ pi + eps
    elif sc.family == "nonlinear":
        delta, eps = _errors(rng, n, sc.confounding, sc.noiseless)
        form = ex.get("form", "quadratic")
        s = float(ex.get("strength", 0.5))
        if form == "quadratic":
            extra = s * Z[:, 0] ** 2
        elif form == "interaction":
            if p < 2:
                raise InvalidScenario("an interaction exposure model needs p >= 2")
            extra = s * Z[:, 0] * Z[:, 1]
        else:
            raise InvalidScenario(f"unknown nonlinear form {form!r}")
        D = Z @ gamma + extra + delta
        Y = sc.beta * D + Z @ pi + eps
    elif sc.family == "hetero_genius":
        theta = np.asarray(ex.get("theta", [0.5] + [0.0] * (p - 1)), dtype=float)
        if theta.shape != (p,):
            raise InvalidScenario("theta must have p entries")
        U = rng.standard_normal(n)
        nu = rng.standard_normal(n)
        e = rng.standard_normal(n)
        rho = sc.confounding
        D = Z @ gamma + U + np.exp(0.5 * Z @ theta) * nu
        Y = sc.beta * D + Z @ pi + rho * U + math.sqrt(1 - rho**2) * e
    else:  # misteri
        eta = np.asarray(ex.get("eta", [0.5] + [0.0] * (p - 1)), dtype=float)
        if eta.shape != (p,):
            raise InvalidScenario("eta must have p entries")
        gamma0 = float(ex.get("gamma0", 0.0))
        D = (rng.uniform(size=n) < 1 / (1 + np.exp(-(gamma0 + Z @ gamma)))).astype(float)
        s = np.exp(float(ex.get("eta0", 0.0)) + Z @ eta)
        xi = np.zeros(n) if sc.noiseless else np.sqrt(s) * rng.standard_normal(n)
        Y = float(ex.get("beta0", 0.0)) + sc.beta * D + Z @ pi + float(ex.get("alpha", 0.3)) * D * s + xi
    data = IVDataset(outcome=Y, exposure=D, instruments=Z)
    return data, Truth(sc.beta, pi, gamma, sc.valid_set)


# ---------------------------------------------------------------------------
# Identification oracle


@dataclass(frozen=True)
class Solution:
    beta: float
    pi: np.ndarray
    valid_set: tuple[int, ...]


def _constant_ratio(r, S, tol=RATIO_TOL):
    vals = r[list(S)]
    return float(np.max(vals) - np.min(vals)) <= tol * max(1.0, float(np.max(np.abs(vals))))


def identification_oracle(Gamma, gamma, rule: str = "majority") -> list[Solution]:
    """All ``(beta, pi)`` consistent with ``Gamma = beta gamma + pi`` under ``rule``.

    ``majority`` keeps constant-ratio subsets larger than ``p/2``;
    ``plurality`` groups instruments by ratio and keeps the largest groups;
    ``andrews`` enumerates every constant-ratio subset and keeps those of
    maximal size.  Solutions are distinct in ``beta`` and carry the largest
    supporting subset.
    """
    Gamma = np.asarray(Gamma, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    p = gamma.size
    if p > MAX_ORACLE_P:
        raise ValueError(f"exhaustive enumeration is limited to p <= {MAX_ORACLE_P}")
    r = Gamma / gamma
    if rule == "plurality":
        groups = []
        for j in np.argsort(r, kind="stable"):
            if groups and _constant_ratio(r, groups[-1] + [int(j)]):
                groups[-1].append(int(j))
            else:
                groups.append([int(j)])
        size = max(len(g) for g in groups)
        sets = [tuple(sorted(g)) for g in groups if len(g) == size]
    elif rule in ("majority", "andrews"):
        lo = p // 2 + 1 if rule == "majority" else 1
        sets = []
        for k in range(p, lo - 1, -1):
            sets = [S for S in itertools.combinations(range(p), k) if _constant_ratio(r, S)]
            if sets and rule == "andrews":
                break
            if sets and rule == "majority":
                break
    else:
        raise ValueError("rule must be 'majority', 'plurality' or 'andrews'")
    out = []
    for S in sets:
        beta = float(np.mean(r[list(S)]))
        if any(abs(beta - s.beta) <= RATIO_TOL * max(1.0, abs(beta)) for s in out):
            continue
        out.append(Solution(beta, Gamma - beta * gamma, S))
    return out


# ---------------------------------------------------------------------------
# Replication engine


def rep_seeds(seed: int, reps: int) -> list[int]:
    """Independent per-replication seeds spawned from ``seed``."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(reps)]


@dataclass
class ExperimentTable:
    """Per-method summaries over replications."""

    rows: list[dict]
    reps: int
    columns: tuple = ("method", "bias", "rmse", "coverage", "med_length", "selection_acc")

    def row(self, method):
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r["method"]] + [_fmt(r[c]) for c in self.columns[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def _fmt(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return repr(float(x))


def _one_rep(args):
    scenario, methods, seed, alpha = args
    from .methods import run_method

    sc = replace(scenario, seed=seed)
    data, truth = generate(sc)
    out = {}
    for name in methods:
        try:
            rep = run_method(name, data, seed=seed, alpha=alpha, truth=truth)
        except Exception as exc:  # a failing replication counts as missing
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        ci = rep.ci
        out[name] = {
            "estimate": rep.beta_hat,
            "covered": None if ci is None else bool(ci.contains(truth.beta)),
            "length": None if ci is None else ci.length,
            "selected": None if rep.valid_set is None else tuple(rep.valid_set) == truth.valid_set,
        }
    return out


def run_experiment(
    scenario: SimScenario,
    methods,
    reps: int,
    jobs: int = 1,
    alpha: float = 0.05,
    warn_filter: str = "ignore",
) -> ExperimentTable:
    """Bias, RMSE, coverage, median CI length and selection accuracy per method.

    Replication ``i`` uses the ``i``-th seed spawned from ``scenario.seed``,
    so the table does not depend on ``jobs``.
    """
    from .methods import check_method

    if reps < 1:
        raise ValueError("reps must be at least 1")
    methods = [str(check_method(m)) for m in methods]
    sc = scenario.resolved()
    tasks = [(sc, methods, s, alpha) for s in rep_seeds(sc.seed, reps)]
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter(warn_filter)
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_quiet, initargs=(warn_filter,)) as ex:
                results = list(ex.map(_one_rep, tasks))
        else:
            results = [_one_rep(t) for t in tasks]
    rows = [_summarize(name, [r[name] for r in results], sc.beta) for name in methods]
    return ExperimentTable(rows=rows, reps=reps)


def _quiet(action):
    import warnings

    warnings.simplefilter(action)


def _summarize(name, recs, beta):
    est = np.array([r["estimate"] for r in recs if r.get("estimate") is not None], dtype=float)
    cov = [r["covered"] for r in recs if r.get("covered") is not None]
    lens = [r["length"] for r in recs if r.get("length") is not None]
    sel = [r["selected"] for r in recs if r.get("selected") is not None]
    return {
        "method": name,
        "bias": float(np.mean(est - beta)) if est.size else None,
        "rmse": float(np.sqrt(np.mean((est - beta) ** 2))) if est.size else None,
        "coverage": float(np.mean(cov)) if cov else None,
        "med_length": float(np.median(lens)) if lens else None,
        "selection_acc": float(np.mean(sel)) if sel else None,
        "failures": sum(1 for r in recs if "error" in r),
    }
