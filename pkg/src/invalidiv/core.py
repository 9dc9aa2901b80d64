"""Shared data model: datasets, reduced-form fits, reports and interval unions.

Everything here is immutable after construction.  Arrays stored on the
dataclasses are copied and flagged read-only so that fits can be shared
between workers without defensive copying.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import (
    DimensionMismatch,
    EmptyInput,
    MissingSampleSize,
    NonPositiveSE,
    ParseError,
    RankDeficient,
    ZeroFirstStage,
)

RANK_TOL = 1e-8
ZERO_FIRST_STAGE = 1e-12
COV_MODES = ("robust", "homoskedastic")


def _frozen(a, ndim):
    arr = np.array(a, dtype=float, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def check_full_rank(matrix, what="instrument matrix"):
    """Raise :class:`RankDeficient` unless ``matrix`` has full column rank.

    The smallest singular value must exceed ``RANK_TOL`` times the largest.
    """
    sv = np.linalg.svd(np.asarray(matrix, dtype=float), compute_uv=False)
    if sv.size == 0 or sv[0] <= 0 or not np.isfinite(sv[0]) or sv[-1] < RANK_TOL * sv[0]:
        cond = float("inf") if sv.size == 0 or sv[-1] == 0 else sv[0] / sv[-1]
        raise RankDeficient(f"{what} is rank-deficient (condition number {cond:.3g})")


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class Moments:
    """Cross-product sufficient statistics of a centered dataset."""

    n: int
    ZtZ: np.ndarray
    ZtD: np.ndarray
    ZtY: np.ndarray
    DtD: float
    DtY: float
    YtY: float
    ZtZ_inv: np.ndarray

    @property
    def gamma_hat(self):
        return self.ZtZ_inv @ self.ZtD

    @property
    def Gamma_hat(self):
        return self.ZtZ_inv @ self.ZtY

    @property
    def DPD(self):
        """``D' P_Z D``."""
        return float(self.ZtD @ self.ZtZ_inv @ self.ZtD)

    @property
    def DPY(self):
        """``D' P_Z Y``."""
        return float(self.ZtD @ self.ZtZ_inv @ self.ZtY)

    @property
    def YPY(self):
        return float(self.ZtY @ self.ZtZ_inv @ self.ZtY)


@dataclass(frozen=True)
class IVDataset:
    """Individual-level data: outcome ``Y``, exposure ``D`` and instruments ``Z``.

    Parameters
    ----------
    outcome : array of shape (n,)
    exposure : array of shape (n,)
    instruments : array of shape (n, p)
    covariates : array of shape (n, q), optional
    centered : bool
        Set by :func:`center_and_validate`.
    names : tuple of str, optional
        Instrument labels, defaults to ``z1 .. zp``.
    """

    outcome: np.ndarray
    exposure: np.ndarray
    instruments: np.ndarray
    covariates: np.ndarray | None = None
    centered: bool = False
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcome", _frozen(self.outcome, 1))
        object.__setattr__(self, "exposure", _frozen(self.exposure, 1))
        object.__setattr__(self, "instruments", _frozen(self.instruments, 2))
        if self.covariates is not None:
            object.__setattr__(self, "covariates", _frozen(self.covariates, 2))
        n = self.outcome.shape[0]
        if self.exposure.shape[0] != n or self.instruments.shape[0] != n:
            raise DimensionMismatch(
                f"outcome ({n}), exposure ({self.exposure.shape[0]}) and instruments "
                f"({self.instruments.shape[0]}) must have the same number of rows"
            )
        if self.covariates is not None and self.covariates.shape[0] != n:
            raise DimensionMismatch("covariates must have one row per observation")
        p = self.instruments.shape[1]
        if p < 1:
            raise DimensionMismatch("at least one instrument is required")
        if n < p + 2:
            raise DimensionMismatch(f"need n >= p + 2, got n={n}, p={p}")
        if self.names is None:
            object.__setattr__(self, "names", tuple(f"z{j + 1}" for j in range(p)))
        else:
            names = tuple(str(s) for s in self.names)
            if len(names) != p:
                raise DimensionMismatch("one name per instrument is required")
            object.__setattr__(self, "names", names)

    @property
    def n(self):
        return self.outcome.shape[0]

    @property
    def p(self):
        return self.instruments.shape[1]

    @cached_property
    def moments(self) -> Moments:
        Z, D, Y = self.instruments, self.exposure, self.outcome
        ZtZ = Z.T @ Z
        return Moments(
            n=self.n,
            ZtZ=ZtZ,
            ZtD=Z.T @ D,
            ZtY=Z.T @ Y,
            DtD=float(D @ D),
            DtY=float(D @ Y),
            YtY=float(Y @ Y),
            ZtZ_inv=np.linalg.inv(ZtZ),
        )

    def replace(self, **changes) -> IVDataset:
        fields_ = dict(
            outcome=self.outcome,
            exposure=self.exposure,
            instruments=self.instruments,
            covariates=self.covariates,
            centered=self.centered,
            names=self.names,
        )
        fields_.update(changes)
        return IVDataset(**fields_)

    def subset(self, rows) -> IVDataset:
        """Rows ``rows`` of the dataset, re-centered."""
        rows = np.asarray(rows)
        sub = self.replace(
            outcome=self.outcome[rows],
            exposure=self.exposure[rows],
            instruments=self.instruments[rows],
            covariates=None if self.covariates is None else self.covariates[rows],
            centered=False,
        )
        return center_and_validate(sub)

    @property
    def residual_dof(self):
        return self.n - self.p - (1 if self.centered else 0)


def center_and_validate(dataset: IVDataset) -> IVDataset:
    """Center outcome, exposure, instruments (and covariates) and check rank."""
    Y = dataset.outcome - dataset.outcome.mean()
    D = dataset.exposure - dataset.exposure.mean()
    Z = dataset.instruments - dataset.instruments.mean(axis=0)
    X = None
    if dataset.covariates is not None:
        X = dataset.covariates - dataset.covariates.mean(axis=0)
    check_full_rank(Z)
    return dataset.replace(outcome=Y, exposure=D, instruments=Z, covariates=X, centered=True)


def residualize_covariates(dataset: IVDataset) -> IVDataset:
    """Partial covariates out of ``Y``, ``D`` and every instrument (Frisch-Waugh-Lovell).

    The data are centered first if needed.  The returned dataset carries no
    covariates.  An instrument that lies in the span of the covariates ends
    up numerically zero, which the caller sees as :class:`RankDeficient` at
    the next rank check.
    """
    if dataset.covariates is None:
        return dataset
    X = dataset.covariates
    if not dataset.centered:
        X = X - X.mean(axis=0)
    check_full_rank(X, "covariate matrix")
    stacked = np.column_stack([dataset.outcome, dataset.exposure, dataset.instruments])
    if not dataset.centered:
        stacked = stacked - stacked.mean(axis=0)
    coef, *_ = np.linalg.lstsq(X, stacked, rcond=None)
    resid = stacked - X @ coef
    return IVDataset(
        outcome=resid[:, 0],
        exposure=resid[:, 1],
        instruments=resid[:, 2:],
        covariates=None,
        centered=True,
        names=dataset.names,
    )


def prepare(dataset: IVDataset) -> IVDataset:
    """Residualize covariates (if any), center, and rank-check."""
    if dataset.covariates is not None:
        dataset = residualize_covariates(dataset)
        check_full_rank(dataset.instruments)
        return dataset
    if not dataset.centered:
        return center_and_validate(dataset)
    return dataset


def first_stage_f(dataset: IVDataset) -> tuple[float, float]:
    """Overall first-stage F statistic of ``D`` on ``Z`` and its p-value."""
    m = dataset.moments
    explained = m.DPD
    rss = max(m.DtD - explained, 0.0)
    df1, df2 = dataset.p, dataset.residual_dof
    if rss <= 0:
        return float("inf"), 0.0
    F = (explained / df1) / (rss / df2)
    return float(F), float(stats.f.sf(F, df1, df2))


# ---------------------------------------------------------------------------
# Reduced form


@dataclass(frozen=True)
class ReducedFormFit:
    """Reduced-form coefficients and their joint sampling covariance.

    ``omega`` is the covariance matrix of the stacked vector
    ``(Gamma_hat, gamma_hat)`` itself, i.e. the asymptotic covariance divided
    by ``n``.  For summary statistics it is ``diag(se_Gamma**2, se_gamma**2)``.
    """

    gamma_hat: np.ndarray
    Gamma_hat: np.ndarray
    omega: np.ndarray
    n: int | None
    source: str = "individual"
    names: tuple[str, ...] | None = None
    cov_mode: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "gamma_hat", _frozen(self.gamma_hat, 1))
        object.__setattr__(self, "Gamma_hat", _frozen(self.Gamma_hat, 1))
        omega = np.array(self.omega, dtype=float)
        p = self.gamma_hat.shape[0]
        if self.Gamma_hat.shape[0] != p or omega.shape != (2 * p, 2 * p):
            raise DimensionMismatch("omega must be 2p x 2p for p-vectors Gamma_hat, gamma_hat")
        omega = 0.5 * (omega + omega.T)
        omega.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        if self.source not in ("individual", "summary"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.names is None:
            object.__setattr__(self, "names", tuple(f"z{j + 1}" for j in range(p)))

    @property
    def p(self):
        return self.gamma_hat.shape[0]

    @property
    def omega_Gamma(self):
        return self.omega[: self.p, : self.p]

    @property
    def omega_gamma(self):
        return self.omega[self.p :, self.p :]

    @property
    def omega_cross(self):
        """Covariance block ``Cov(Gamma_hat, gamma_hat)``."""
        return self.omega[: self.p, self.p :]

    def require_n(self) -> int:
        if self.n is None:
            raise MissingSampleSize("this operation needs the sample size n of the fit")
        return self.n

    @property
    def asymptotic_omega(self):
        """``n * omega``, the covariance of the root-n scaled estimates."""
        return self.require_n() * self.omega

    def check_first_stage(self):
        small = np.abs(self.gamma_hat) <= ZERO_FIRST_STAGE
        if small.any():
            bad = [self.names[j] for j in np.flatnonzero(small)]
            raise ZeroFirstStage(f"first-stage coefficient is zero for {', '.join(bad)}")

    def ratios(self):
        """Per-instrument ratio estimates ``Gamma_hat_j / gamma_hat_j``."""
        self.check_first_stage()
        return self.Gamma_hat / self.gamma_hat

    def ratio_se(self):
        """Delta-method standard errors of the per-instrument ratios."""
        self.check_first_stage()
        p = self.p
        G, g = self.Gamma_hat, self.gamma_hat
        vGG = np.diag(self.omega)[:p]
        vgg = np.diag(self.omega)[p:]
        vGg = np.diag(self.omega_cross)
        var = vGG / g**2 - 2 * G * vGg / g**3 + G**2 * vgg / g**4
        return np.sqrt(np.maximum(var, 0.0))

    def diff_se(self, beta):
        """Standard error of ``Gamma_hat_j - beta * gamma_hat_j``.

        ``beta`` may be an array; the result has shape ``beta.shape + (p,)``.
        """
        p = self.p
        b = np.asarray(beta, dtype=float)[..., None]
        vGG = np.diag(self.omega)[:p]
        vgg = np.diag(self.omega)[p:]
        vGg = np.diag(self.omega_cross)
        var = vGG - 2 * b * vGg + b**2 * vgg
        return np.sqrt(np.maximum(var, 0.0))

    def to_records(self):
        """Per-instrument ``(gamma_hat, se_gamma, Gamma_hat, se_Gamma)`` tuples.

        Off-diagonal covariance is dropped, matching the summary-data format.
        """
        p = self.p
        d = np.sqrt(np.diag(self.omega))
        return [
            (float(self.gamma_hat[j]), float(d[p + j]), float(self.Gamma_hat[j]), float(d[j]))
            for j in range(p)
        ]


def fit_reduced_form(dataset: IVDataset, cov_mode: str = "robust") -> ReducedFormFit:
    """OLS of ``Y`` and ``D`` on ``Z`` with the joint covariance of the coefficients.

    Parameters
    ----------
    dataset : IVDataset
        Centered and rank-checked data.
    cov_mode : {"robust", "homoskedastic"}
        ``robust`` is the HC1 sandwich across both equations; ``homoskedastic``
        uses the 2x2 cross-equation residual covariance times ``(Z'Z)^{-1}``.
    """
    if cov_mode not in COV_MODES:
        raise ValueError(f"cov_mode must be one of {COV_MODES}")
    if not dataset.centered:
        dataset = center_and_validate(dataset)
    m = dataset.moments
    Z = dataset.instruments
    gamma_hat = m.gamma_hat
    Gamma_hat = m.Gamma_hat
    eY = dataset.outcome - Z @ Gamma_hat
    eD = dataset.exposure - Z @ gamma_hat
    dof = dataset.residual_dof
    B = m.ZtZ_inv
    if cov_mode == "homoskedastic":
        E = np.column_stack([eY, eD])
        sigma = E.T @ E / dof
        omega = np.kron(sigma, B)
    else:
        ZY = Z * eY[:, None]
        ZD = Z * eD[:, None]
        scale = dataset.n / dof
        vYY = B @ (ZY.T @ ZY) @ B
        vDD = B @ (ZD.T @ ZD) @ B
        vYD = B @ (ZY.T @ ZD) @ B
        omega = scale * np.block([[vYY, vYD], [vYD.T, vDD]])
    return ReducedFormFit(
        gamma_hat=gamma_hat,
        Gamma_hat=Gamma_hat,
        omega=omega,
        n=dataset.n,
        source="individual",
        names=dataset.names,
        cov_mode=cov_mode,
    )


def load_summary_stats(records, n=None, names=None) -> ReducedFormFit:
    """Build a :class:`ReducedFormFit` from two-sample summary statistics.

    Parameters
    ----------
    records : sequence of (gamma_hat, se_gamma, Gamma_hat, se_Gamma)
        One tuple per instrument.
    n : int, optional
        Sample size; operations that tune on ``n`` raise
        :class:`MissingSampleSize` when it is absent.
    names : sequence of str, optional
    """
    rows = [tuple(float(v) for v in r) for r in records]
    if not rows:
        raise EmptyInput("no summary records supplied")
    for i, r in enumerate(rows):
        if len(r) != 4:
            raise DimensionMismatch(f"record {i} has {len(r)} fields, expected 4")
        if not (r[1] > 0 and r[3] > 0) or not all(math.isfinite(v) for v in r):
            raise NonPositiveSE(f"record {i}: standard errors must be positive and finite")
    arr = np.array(rows)
    omega = np.diag(np.concatenate([arr[:, 3] ** 2, arr[:, 1] ** 2]))
    return ReducedFormFit(
        gamma_hat=arr[:, 0],
        Gamma_hat=arr[:, 2],
        omega=omega,
        n=None if n is None else int(n),
        source="summary",
        names=None if names is None else tuple(names),
    )


# ---------------------------------------------------------------------------
# Interval unions and reports


@dataclass(frozen=True)
class IntervalUnion:
    """A finite union of disjoint, sorted closed intervals.

    ``flags`` carries procedure notes such as ``"empty_union"`` or
    ``"fallback"``; they do not affect the set itself.
    """

    intervals: tuple[tuple[float, float], ...] = ()
    flags: frozenset = frozenset()

    def __post_init__(self):
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        for lo, hi in ivs:
            if not lo <= hi:
                raise ValueError(f"interval ({lo}, {hi}) has lower > upper")
        for (_, h0), (l1, _) in zip(ivs, ivs[1:]):
            if not h0 < l1:
                raise ValueError("intervals must be sorted and pairwise disjoint")
        object.__setattr__(self, "intervals", ivs)
        object.__setattr__(self, "flags", frozenset(self.flags))

    @classmethod
    def merge(cls, pieces: Iterable[tuple[float, float]], flags=()) -> IntervalUnion:
        """Union of arbitrary (possibly overlapping) closed intervals."""
        srt = sorted((float(lo), float(hi)) for lo, hi in pieces)
        out: list[list[float]] = []
        for lo, hi in srt:
            if out and lo <= out[-1][1]:
                out[-1][1] = max(out[-1][1], hi)
            else:
                out.append([lo, hi])
        return cls(tuple((lo, hi) for lo, hi in out), frozenset(flags))

    @classmethod
    def single(cls, lo, hi, flags=()) -> IntervalUnion:
        return cls(((lo, hi),), frozenset(flags))

    def with_flags(self, *flags) -> IntervalUnion:
        return IntervalUnion(self.intervals, self.flags | set(flags))

    @property
    def is_empty(self):
        return not self.intervals

    @property
    def lower(self):
        return self.intervals[0][0] if self.intervals else float("nan")

    @property
    def upper(self):
        return self.intervals[-1][1] if self.intervals else float("nan")

    @property
    def length(self):
        return float(sum(hi - lo for lo, hi in self.intervals))

    def contains(self, x):
        return any(lo <= x <= hi for lo, hi in self.intervals)

    def hull(self) -> IntervalUnion:
        if self.is_empty:
            return self
        return IntervalUnion(((self.lower, self.upper),), self.flags)

    def issubset(self, other: IntervalUnion, tol=0.0):
        return all(
            any(lo2 - tol <= lo and hi <= hi2 + tol for lo2, hi2 in other.intervals)
            for lo, hi in self.intervals
        )

    def to_list(self):
        return [[lo, hi] for lo, hi in self.intervals]


@dataclass(frozen=True)
class EstimateReport:
    """Outcome of one estimation method.

    ``valid_set`` holds 0-based instrument indices.
    """

    method: str
    beta_hat: float | None
    se: float | None = None
    ci: IntervalUnion | None = None
    valid_set: tuple[int, ...] | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, names: Sequence[str] | None = None):
        def num(x):
            if x is None:
                return None
            x = float(x)
            return x if math.isfinite(x) else None

        out = {
            "method": self.method,
            "beta_hat": num(self.beta_hat),
            "se": num(self.se),
            "ci": None if self.ci is None else [[_bound(lo), _bound(hi)] for lo, hi in self.ci.intervals],
            "ci_flags": None if self.ci is None else sorted(self.ci.flags),
            "valid_set": None if self.valid_set is None else [int(j) for j in self.valid_set],
            "diagnostics": _jsonable(self.diagnostics),
        }
        if names is not None and self.valid_set is not None:
            out["valid_names"] = [names[j] for j in self.valid_set]
        return out


def _bound(x):
    """Interval endpoint for JSON; infinite endpoints become ``"-inf"``/``"inf"``."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (frozenset, set)):
        return sorted(_jsonable(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def normal_quantile(level):
    return float(stats.norm.ppf(level))


def wald_ci(beta_hat, se, alpha=0.05) -> IntervalUnion:
    z = normal_quantile(1 - alpha / 2)
    return IntervalUnion.single(beta_hat - z * se, beta_hat + z * se, flags=("wald",))


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_float(text, line, path, column):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", line, path) from None


def read_individual_csv(path) -> IVDataset:
    """Read ``y, d, z1..zp[, x1..xq]`` columns from a headed CSV file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty", 1, path) from None
        if "y" not in header or "d" not in header:
            raise ParseError("header must contain columns 'y' and 'd'", 1, path)
        z_cols = _numbered(header, "z", path)
        x_cols = _numbered(header, "x", path, required=False)
        if not z_cols:
            raise ParseError("header must contain instrument columns z1..zp", 1, path)
        iy, idd = header.index("y"), header.index("d")
        iz = [header.index(c) for c in z_cols]
        ix = [header.index(c) for c in x_cols]
        ys, ds, zs, xs = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line, path)
            ys.append(_parse_float(row[iy], line, path, "y"))
            ds.append(_parse_float(row[idd], line, path, "d"))
            zs.append([_parse_float(row[i], line, path, header[i]) for i in iz])
            if ix:
                xs.append([_parse_float(row[i], line, path, header[i]) for i in ix])
    if not ys:
        raise ParseError("no data rows", None, path)
    return IVDataset(
        outcome=np.array(ys),
        exposure=np.array(ds),
        instruments=np.array(zs),
        covariates=np.array(xs) if ix else None,
        names=tuple(z_cols),
    )


def _numbered(header, prefix, path, required=True):
    cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
    idx = sorted(int(c[len(prefix):]) for c in cols)
    if idx and idx != list(range(1, len(idx) + 1)):
        raise ParseError(f"columns {prefix}1..{prefix}{len(idx)} must be consecutive", 1, path)
    return [f"{prefix}{k}" for k in idx]


SUMMARY_COLUMNS = ("gamma_hat", "se_gamma", "Gamma_hat", "se_Gamma")


def read_summary_csv(path, n=None) -> ReducedFormFit:
    """Read a summary-statistic CSV (``gamma_hat,se_gamma,Gamma_hat,se_Gamma``).

    An optional ``name`` column labels the instruments.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty", 1, path) from None
        missing = [c for c in SUMMARY_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing columns: {', '.join(missing)}", 1, path)
        idx = [header.index(c) for c in SUMMARY_COLUMNS]
        iname = header.index("name") if "name" in header else None
        records, names = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line, path)
            rec = tuple(_parse_float(row[i], line, path, header[i]) for i in idx)
            if not (rec[1] > 0 and rec[3] > 0):
                raise NonPositiveSE(f"{path}:{line}: standard errors must be positive")
            records.append(rec)
            names.append(row[iname].strip() if iname is not None else f"z{len(names) + 1}")
    return load_summary_stats(records, n=n, names=names)


def write_summary_csv(fit: ReducedFormFit, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("name",) + SUMMARY_COLUMNS)
        for name, rec in zip(fit.names, fit.to_records()):
            w.writerow((name,) + tuple(repr(v) for v in rec))


def write_individual_csv(dataset: IVDataset, path):
    path = Path(path)
    q = 0 if dataset.covariates is None else dataset.covariates.shape[1]
    header = ["y", "d"] + [f"z{j + 1}" for j in range(dataset.p)] + [f"x{k + 1}" for k in range(q)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            row = [dataset.outcome[i], dataset.exposure[i], *dataset.instruments[i]]
            if q:
                row.extend(dataset.covariates[i])
            w.writerow([repr(float(v)) for v in row])
