"""Confidence sets for beta that remain valid without selection consistency.

``union_ci`` unions per-subset intervals over J-test survivors,
``searching_ci`` collects the beta values at which a majority of reduced-form
constraints hold, and ``sampling_ci`` repeats that search on resampled
reduced-form estimates with a shrunken threshold.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from .core import (
    IntervalUnion,
    IVDataset,
    ReducedFormFit,
    fit_reduced_form,
    normal_quantile,
    prepare,
)
from .errors import CombinatorialLimit, GridTooCoarse, GridTooFine, InvalidAlphas
from .linear import tsls
from .selection import j_test

MIN_GRID_POINTS = 100
MAX_GRID_POINTS = 2_000_000
MAX_SUBSETS = 1_000_000
DEFAULT_CN = 0.35
CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class SearchGrid:
    """Equally spaced grid ``lower, lower + step, ...`` not exceeding ``upper``."""

    lower: float
    upper: float
    step: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper) and self.lower < self.upper):
            raise ValueError("grid needs finite lower < upper")
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if (self.upper - self.lower) / self.step > MAX_GRID_POINTS:
            raise GridTooFine(f"grid would exceed {MAX_GRID_POINTS} points")

    @property
    def points(self):
        count = int(math.floor((self.upper - self.lower) / self.step + 1e-9)) + 1
        return self.lower + self.step * np.arange(count)

    def require_points(self, minimum=MIN_GRID_POINTS):
        pts = self.points
        if pts.size < minimum:
            raise GridTooCoarse(f"grid has {pts.size} points, at least {minimum} needed")
        return pts


def default_grid(fit: ReducedFormFit) -> SearchGrid:
    """``[min r - 10 max se, max r + 10 max se]`` with step ``min se / 10``.

    ``r`` are the per-instrument ratios and ``se`` their delta-method standard
    errors.  The step is widened if the grid would exceed the point guard.
    """
    r = fit.ratios()
    se = fit.ratio_se()
    lo = float(r.min() - 10 * se.max())
    hi = float(r.max() + 10 * se.max())
    step = float(se.min() / 10)
    if not step > 0:
        step = (hi - lo) / 1000 if hi > lo else 1e-3
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    step = max(step, (hi - lo) / (MAX_GRID_POINTS - 1))
    return SearchGrid(lo, hi, step)


def runs_to_intervals(points, accepted, flags=()) -> IntervalUnion:
    """Merge maximal runs of accepted consecutive grid points into intervals."""
    acc = np.asarray(accepted, dtype=bool)
    if not acc.any():
        return IntervalUnion((), frozenset(flags))
    padded = np.concatenate([[False], acc, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return IntervalUnion(tuple((float(points[a]), float(points[b])) for a, b in zip(starts, ends)), frozenset(flags))


# ---------------------------------------------------------------------------
# Searching and sampling


def count_valid(fit: ReducedFormFit, betas, alpha: float = 0.05, scale: float = 1.0, Gamma=None, gamma=None):
    """``L(beta)``: number of instruments with ``|Gamma_j - beta gamma_j|`` within threshold.

    The threshold is ``scale * z_{1 - alpha/(2p)} * se(Gamma_hat_j - beta gamma_hat_j)``
    with the standard error always taken from ``fit``.  ``Gamma`` and
    ``gamma`` default to the fitted values.
    """
    betas = np.asarray(betas, dtype=float)
    G = fit.Gamma_hat if Gamma is None else np.asarray(Gamma, dtype=float)
    g = fit.gamma_hat if gamma is None else np.asarray(gamma, dtype=float)
    z = normal_quantile(1 - alpha / (2 * fit.p))
    out = np.empty(betas.shape, dtype=int)
    flat = betas.ravel()
    res = out.ravel()
    step = max(1, CHUNK_ELEMENTS // fit.p)
    for a in range(0, flat.size, step):
        b = flat[a : a + step]
        dev = np.abs(G[None, :] - b[:, None] * g[None, :])
        res[a : a + step] = (dev <= scale * z * fit.diff_se(b)).sum(axis=1)
    return out


def searching_ci(fit: ReducedFormFit, alpha: float = 0.05, grid: SearchGrid | None = None) -> IntervalUnion:
    """Grid values of beta at which more than half of the instruments look valid."""
    fit.check_first_stage()
    if grid is None:
        grid = default_grid(fit)
    pts = grid.require_points()
    L = count_valid(fit, pts, alpha)
    return runs_to_intervals(pts, L > fit.p / 2)


def shrinkage_lambda(n: int, m: int, p: int, c_n: float = DEFAULT_CN) -> float:
    """``c_n * (log(n) / m) ** (1 / (2p))``."""
    return c_n * (math.log(n) / m) ** (1.0 / (2 * p))


def sampling_ci(
    fit: ReducedFormFit,
    alpha: float = 0.05,
    m: int = 1000,
    c_n: float | None = None,
    seed=0,
    lam: float | None = None,
    grid: SearchGrid | None = None,
    resample_cov=None,
) -> IntervalUnion:
    """Resampled searching sets with a shrunken threshold, bracketed into one interval.

    Draws ``m`` normal perturbations of ``(Gamma_hat, gamma_hat)`` with
    covariance ``fit.omega``, recomputes the searching set with the threshold
    scaled by ``lam`` (default ``c_n * (log n / m)^(1/(2p))``) and returns
    ``[min lower, max upper]`` over non-empty sets.  If every set is empty
    the plain searching interval is returned, flagged ``"fallback"``.
    ``resample_cov`` replaces ``fit.omega`` for the draws only; the
    thresholds always use the standard errors of the original fit.
    """
    fit.check_first_stage()
    p = fit.p
    if lam is None:
        lam = shrinkage_lambda(fit.require_n(), m, p, DEFAULT_CN if c_n is None else c_n)
    if grid is None:
        grid = default_grid(fit)
    pts = grid.require_points()
    z = normal_quantile(1 - alpha / (2 * p))
    thresh = lam * z * fit.diff_se(pts)  # (G, p)
    rng = np.random.default_rng(seed)
    mean = np.concatenate([fit.Gamma_hat, fit.gamma_hat])
    cov = fit.omega if resample_cov is None else np.asarray(resample_cov, dtype=float)
    draws = rng.multivariate_normal(mean, cov, size=m, method="eigh")
    lows, highs = [], []
    batch = max(1, CHUNK_ELEMENTS // (pts.size * p))
    for a in range(0, m, batch):
        Gm = draws[a : a + batch, :p]
        gm = draws[a : a + batch, p:]
        dev = np.abs(Gm[:, None, :] - pts[None, :, None] * gm[:, None, :])
        acc = (dev <= thresh[None]).sum(axis=2) > p / 2
        hit = acc.any(axis=1)
        if hit.any():
            first = acc[hit].argmax(axis=1)
            last = pts.size - 1 - acc[hit][:, ::-1].argmax(axis=1)
            lows.append(pts[first].min())
            highs.append(pts[last].max())
    if not lows:
        return searching_ci(fit, alpha, grid).with_flags("fallback")
    return IntervalUnion.single(min(lows), max(highs))


# ---------------------------------------------------------------------------
# Union of per-subset intervals


def _quad_forms(data: IVDataset, cols):
    """2x2 matrix ``[y d]' P_S [y d]`` for the projection onto instrument columns ``cols``."""
    m = data.moments
    if not cols:
        return np.zeros((2, 2))
    cols = list(cols)
    A = np.column_stack([m.ZtY[cols], m.ZtD[cols]])
    return A.T @ np.linalg.solve(m.ZtZ[np.ix_(cols, cols)], A)


def _partialled(data: IVDataset, V):
    """Projection and residual blocks after partialling out the instruments outside ``V``.

    Returns ``(Psi, Omega, dof)`` where ``Psi = [y d]'(P_Z - P_{Z_Vc})[y d]`` and
    ``Omega`` is the reduced-form residual covariance ``[y d]'M_Z[y d] / dof``.
    """
    m = data.moments
    p = data.p
    Vc = [j for j in range(p) if j not in set(V)]
    full = _quad_forms(data, range(p))
    ctrl = _quad_forms(data, Vc)
    raw = np.array([[m.YtY, m.DtY], [m.DtY, m.DtD]])
    dof = data.residual_dof
    return full - ctrl, (raw - full) / dof, dof


def anderson_rubin_ci(data: IVDataset, V, alpha: float = 0.05) -> IntervalUnion:
    """Inversion of the homoskedastic Anderson-Rubin test, solved in closed form.

    The acceptance region ``{beta : AR(beta) <= F_{v, dof, 1-alpha}}`` is the
    set where a quadratic in beta is non-positive, so it may be a bounded
    interval, the union of two rays, empty, or the whole line.
    """
    data = prepare(data)
    v = len(V)
    Psi, Omega, dof = _partialled(data, V)
    kappa = v * stats.f.ppf(1 - alpha, v, dof) / dof
    # u = y - beta d; numerator u'Psi u, denominator u'(dof * Omega)u
    Q = Psi - kappa * dof * Omega
    a2, a1, a0 = Q[1, 1], -2 * Q[0, 1], Q[0, 0]
    return _quadratic_region(a2, a1, a0)


def _quadratic_region(a2, a1, a0) -> IntervalUnion:
    """``{x : a2 x^2 + a1 x + a0 <= 0}`` as an interval union."""
    inf = math.inf
    scale = max(abs(a2), abs(a1), abs(a0), np.finfo(float).tiny)
    if abs(a2) <= 1e-14 * scale:
        if abs(a1) <= 1e-14 * scale:
            return IntervalUnion(((-inf, inf),)) if a0 <= 0 else IntervalUnion(())
        root = -a0 / a1
        return IntervalUnion(((-inf, root),)) if a1 > 0 else IntervalUnion(((root, inf),))
    disc = a1 * a1 - 4 * a2 * a0
    if disc < 0:
        return IntervalUnion(()) if a2 > 0 else IntervalUnion(((-inf, inf),))
    sq = math.sqrt(disc)
    r1, r2 = sorted(((-a1 - sq) / (2 * a2), (-a1 + sq) / (2 * a2)))
    if a2 > 0:
        return IntervalUnion(((r1, r2),))
    if r1 == r2:
        return IntervalUnion(((-inf, inf),))
    return IntervalUnion(((-inf, r1), (r2, inf)))


def clr_cdf(z, k: int, s):
    """``P(LR <= z | Q_T = s)`` for the conditional likelihood-ratio statistic.

    Uses the series ``(1-a)^(1/2) sum_j a^j (1/2)_j / j! F_{k+2j}(z+s)``
    with ``a = s / (z + s)``, where ``F_m`` is the chi-square(m) CDF.  The
    series is summed until the chi-square terms are negligible.
    """
    if z <= 0:
        return 0.0
    if s <= 0:
        return float(stats.chi2.cdf(z, k))
    a = s / (z + s)
    x = z + s
    J = int(x / 2 + 12 * math.sqrt(x) + 60)
    j = np.arange(J + 1)
    log_w = j * math.log(a) + special.gammaln(j + 0.5) - special.gammaln(0.5) - special.gammaln(j + 1)
    terms = np.exp(log_w + 0.5 * math.log1p(-a)) * stats.chi2.cdf(x, k + 2 * j)
    return float(min(terms.sum(), 1.0))


CLR_S_GRID = np.concatenate([[0.0], np.geomspace(1e-3, 1e4, 121)])


@lru_cache(maxsize=64)
def _clr_table(k: int, alpha: float):
    q1 = stats.chi2.ppf(1 - alpha, 1)
    qk = stats.chi2.ppf(1 - alpha, k)
    if k == 1:
        return np.full(CLR_S_GRID.shape, q1)
    out = np.empty(CLR_S_GRID.shape)
    for i, s in enumerate(CLR_S_GRID):
        if s == 0:
            out[i] = qk
            continue
        f = lambda z: clr_cdf(z, k, s) - (1 - alpha)  # noqa: E731
        lo, hi = q1 * (1 - 1e-9), qk * (1 + 1e-9)
        if f(lo) >= 0:
            out[i] = lo
        elif f(hi) <= 0:
            out[i] = hi
        else:
            out[i] = optimize.brentq(f, lo, hi, xtol=1e-10)
    return out


def clr_critical_value(k: int, alpha: float, s):
    """Conditional critical value of the LR statistic given ``Q_T = s``.

    Tabulated on a log grid of ``s`` and linearly interpolated; beyond the
    table the last value (close to the chi-square(1) quantile) is used.
    """
    table = _clr_table(int(k), float(alpha))
    return np.interp(np.asarray(s, dtype=float), CLR_S_GRID, table)


def clr_statistics(data: IVDataset, V, betas):
    """Moreira's ``(LR, Q_T)`` at each beta with the instruments outside ``V`` as controls."""
    Psi, Omega, _ = _partialled(prepare(data), V)
    Oinv = np.linalg.inv(Omega)
    b = np.asarray(betas, dtype=float)
    b0 = np.stack([np.ones_like(b), -b], axis=-1)
    a0 = np.stack([b, np.ones_like(b)], axis=-1)
    bOb = np.einsum("...i,ij,...j->...", b0, Omega, b0)
    aOa = np.einsum("...i,ij,...j->...", a0, Oinv, a0)
    Oa = a0 @ Oinv
    QS = np.einsum("...i,ij,...j->...", b0, Psi, b0) / bOb
    QT = np.einsum("...i,ij,...j->...", Oa, Psi, Oa) / aOa
    QST = np.einsum("...i,ij,...j->...", b0, Psi, Oa) / np.sqrt(bOb * aOa)
    disc = np.maximum((QS + QT) ** 2 - 4 * (QS * QT - QST**2), 0.0)
    LR = 0.5 * (QS - QT + np.sqrt(disc))
    return LR, QT


def clr_ci(data: IVDataset, V, alpha: float, grid: SearchGrid) -> IntervalUnion:
    """Grid inversion of the conditional likelihood-ratio test.

    Sets touching a grid edge are flagged ``"truncated"``.
    """
    data = prepare(data)
    pts = grid.require_points()
    LR, QT = clr_statistics(data, V, pts)
    acc = LR <= clr_critical_value(len(V), alpha, QT)
    flags = ("truncated",) if (acc[0] or acc[-1]) else ()
    return runs_to_intervals(pts, acc, flags)


INNER_METHODS = ("wald", "anderson_rubin", "clr")


def union_ci(
    dataset: IVDataset,
    v: int,
    alpha_s: float = 0.01,
    alpha_t: float = 0.04,
    inner: str = "wald",
    cov_mode: str = "robust",
    grid: SearchGrid | None = None,
) -> IntervalUnion:
    """Union of level ``1 - alpha_t`` intervals over size-``v`` subsets passing the J screen.

    Subsets of size one skip the screen.  An empty result is flagged
    ``"empty_union"``: no size-``v`` subset is compatible with the data,
    which is evidence against ``|V| >= v``.
    """
    data = prepare(dataset)
    p = data.p
    if not 1 <= v <= p:
        raise ValueError(f"v must lie in 1..{p}")
    if not (alpha_s > 0 and alpha_t > 0 and alpha_s + alpha_t < 1):
        raise InvalidAlphas("need alpha_s > 0, alpha_t > 0 and alpha_s + alpha_t < 1")
    if inner not in INNER_METHODS:
        raise ValueError(f"inner must be one of {INNER_METHODS}")
    if math.comb(p, v) > MAX_SUBSETS:
        raise CombinatorialLimit(f"C({p}, {v}) subsets exceed {MAX_SUBSETS}")
    crit = stats.chi2.ppf(1 - alpha_s, v - 1) if v >= 2 else math.inf
    if inner == "clr" and grid is None:
        grid = default_grid(fit_reduced_form(data, cov_mode))
    pieces = []
    flags = set()
    for V in itertools.combinations(range(p), v):
        if v >= 2 and j_test(data, V, cov_mode)[0] > crit:
            continue
        if inner == "wald":
            ci = tsls(data, V, cov_mode=cov_mode, alpha=alpha_t).ci
        elif inner == "anderson_rubin":
            ci = anderson_rubin_ci(data, V, alpha_t)
        else:
            ci = clr_ci(data, V, alpha_t, grid)
            flags |= ci.flags
        pieces.extend(ci.intervals)
    if not pieces:
        flags.add("empty_union")
    return IntervalUnion.merge(pieces, flags)


__all__ = [
    "SearchGrid",
    "anderson_rubin_ci",
    "clr_cdf",
    "clr_ci",
    "clr_critical_value",
    "clr_statistics",
    "count_valid",
    "default_grid",
    "sampling_ci",
    "searching_ci",
    "shrinkage_lambda",
    "union_ci",
]
