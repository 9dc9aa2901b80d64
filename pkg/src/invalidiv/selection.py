"""Selection of valid instruments followed by pointwise inference.

Contains the overidentification J test, downward testing over candidate
valid sets, plurality voting on pairwise ratio agreement (TSHT) and
clustering of working confidence intervals (CIM).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import (
    EstimateReport,
    IVDataset,
    ReducedFormFit,
    fit_reduced_form,
    normal_quantile,
    prepare,
    wald_ci,
)
from .errors import Underidentified, WeakFirstStage
from .linear import _as_index_set, _tsls_fit, tsls

NOISELESS_TOL = 1e-20
CIM_GRID_SIZE = 30


# ---------------------------------------------------------------------------
# J test and downward testing


def j_test(dataset: IVDataset, valid_set, cov_mode: str = "robust") -> tuple[float, float]:
    """Overidentification test of the instruments in ``valid_set``.

    The instruments outside ``valid_set`` enter as controls.  In ``robust``
    mode the statistic is Hansen's J from two-step efficient GMM; in
    ``homoskedastic`` mode it is Sargan's ``n * R^2`` form from TSLS
    residuals.  The reference law is chi-square with ``|valid_set| - 1``
    degrees of freedom.

    Returns
    -------
    statistic, p_value : float
    """
    data = prepare(dataset)
    V = _as_index_set(valid_set, data.p)
    if len(V) < 2:
        raise Underidentified("the J test needs at least two instruments treated as valid")
    df = len(V) - 1
    fit = _tsls_fit(data, V)
    u = fit.residuals
    m = data.moments
    uu = float(u @ u)
    if uu <= NOISELESS_TOL * max(m.YtY, np.finfo(float).tiny):
        return 0.0, 1.0
    Z = data.instruments
    n = data.n
    Ztu = Z.T @ u
    if cov_mode == "homoskedastic":
        stat = float(Ztu @ m.ZtZ_inv @ Ztu) / (uu / n)
    else:
        Zu = Z * u[:, None]
        S = Zu.T @ Zu / n
        Sinv = np.linalg.pinv(S, hermitian=True)
        ZtX = np.column_stack([m.ZtD, m.ZtZ[:, list(fit.invalid)]])
        ZtY = m.ZtY
        A = ZtX.T @ Sinv @ ZtX
        theta = np.linalg.solve(A, ZtX.T @ Sinv @ ZtY)
        g = (ZtY - ZtX @ theta) / n
        stat = float(n * g @ Sinv @ g)
    stat = max(stat, 0.0)
    return stat, float(stats.chi2.sf(stat, df))


@dataclass(frozen=True)
class DownwardResult:
    """Outcome of downward testing.

    ``passed`` is False when no candidate survived and the last candidate was
    returned by default.  ``trace`` lists ``(set, statistic, p_value)`` for
    every candidate examined.
    """

    valid_set: tuple[int, ...]
    statistic: float
    p_value: float
    passed: bool
    trace: list = field(default_factory=list)


def downward_testing(candidates, dataset: IVDataset, level: float, cov_mode: str = "robust") -> DownwardResult:
    """Return the first candidate (largest first) not rejected by the J test.

    A just-identified candidate (one instrument) cannot be tested and is
    accepted with statistic 0 and p-value 1.
    """
    candidates = [tuple(c) for c in candidates]
    if not candidates:
        raise ValueError("downward testing needs at least one candidate set")
    data = prepare(dataset)
    trace = []
    for cand in candidates:
        if len(cand) < 2:
            stat, pval = 0.0, 1.0
        else:
            stat, pval = j_test(data, cand, cov_mode)
        trace.append((cand, stat, pval))
        if pval > level:
            return DownwardResult(cand, stat, pval, True, trace)
    cand, stat, pval = trace[-1]
    return DownwardResult(cand, stat, pval, False, trace)


def default_level(n: int) -> float:
    """Downward-testing level ``0.1 / log(n)``."""
    return 0.1 / math.log(n)


# ---------------------------------------------------------------------------
# Ratio covariance


def ratio_cov(fit: ReducedFormFit):
    """Delta-method covariance of the ratio estimates ``Gamma_hat_j / gamma_hat_j``."""
    fit.check_first_stage()
    p = fit.p
    G, g = fit.Gamma_hat, fit.gamma_hat
    J = np.zeros((p, 2 * p))
    J[np.arange(p), np.arange(p)] = 1.0 / g
    J[np.arange(p), p + np.arange(p)] = -G / g**2
    return J @ fit.omega @ J.T


@dataclass(frozen=True)
class VotingMatrix:
    """Pairwise agreement of per-instrument ratio estimates.

    ``entries[j, k]`` is 1 when the ratios of instruments ``j`` and ``k``
    differ by at most ``threshold_quantile`` standard errors of their
    difference.
    """

    entries: np.ndarray
    threshold_quantile: float
    se_pairs: np.ndarray

    @property
    def votes(self):
        return self.entries.sum(axis=1)

    def selected(self):
        """Instruments with a majority of votes or the maximal vote count."""
        votes = self.votes
        p = votes.shape[0]
        keep = (votes > p / 2) | (votes == votes.max())
        return tuple(int(j) for j in np.flatnonzero(keep))


def voting_matrix(fit: ReducedFormFit, alpha: float = 0.05) -> VotingMatrix:
    p = fit.p
    r = fit.ratios()
    C = ratio_cov(fit)
    d = np.diag(C)
    var = d[:, None] + d[None, :] - 2 * C
    se = np.sqrt(np.maximum(var, 0.0))
    np.fill_diagonal(se, 0.0)
    z = normal_quantile(1 - alpha / (2 * p))
    H = (np.abs(r[:, None] - r[None, :]) <= z * se).astype(int)
    np.fill_diagonal(H, 1)
    return VotingMatrix(entries=H, threshold_quantile=z, se_pairs=se)


def summary_gmm(fit: ReducedFormFit, valid_set, alpha: float = 0.05) -> EstimateReport:
    """Two-step minimum-distance estimate from ``Gamma_V = beta * gamma_V``.

    The weight is the inverse covariance of ``Gamma_hat_V - beta * gamma_hat_V``
    evaluated at a first-step inverse-variance-weighted estimate.
    """
    V = list(_as_index_set(valid_set, fit.p))
    G = fit.Gamma_hat[V]
    g = fit.gamma_hat[V]
    p = fit.p
    oGG = fit.omega[np.ix_(V, V)]
    ogg = fit.omega[np.ix_([p + j for j in V], [p + j for j in V])]
    oGg = fit.omega[np.ix_(V, [p + j for j in V])]

    def weight(b):
        cov = oGG - b * (oGg + oGg.T) + b**2 * ogg
        return np.linalg.pinv(cov, hermitian=True)

    W = np.linalg.pinv(oGG, hermitian=True)
    beta = float(g @ W @ G / (g @ W @ g))
    W = weight(beta)
    beta = float(g @ W @ G / (g @ W @ g))
    W = weight(beta)
    se = float(1.0 / math.sqrt(g @ W @ g))
    return EstimateReport("summary_gmm", beta, se, wald_ci(beta, se, alpha), tuple(V))


def _post_selection(method, V, dataset, fit, cov_mode, alpha, diagnostics):
    if dataset is not None:
        post = tsls(dataset, V, cov_mode=cov_mode, alpha=alpha)
    else:
        post = summary_gmm(fit, V, alpha=alpha)
    return EstimateReport(
        method=method,
        beta_hat=post.beta_hat,
        se=post.se,
        ci=post.ci,
        valid_set=tuple(V),
        diagnostics=diagnostics,
    )


def _first_stage_warning(fit: ReducedFormFit):
    t = np.abs(fit.gamma_hat) / np.sqrt(np.maximum(np.diag(fit.omega_gamma), np.finfo(float).tiny))
    if t.min() < 2:
        warnings.warn(
            f"smallest first-stage t statistic is {t.min():.2f}; ratio estimates may be unreliable",
            WeakFirstStage,
            stacklevel=3,
        )


def tsht(
    fit: ReducedFormFit,
    alpha: float = 0.05,
    dataset: IVDataset | None = None,
    cov_mode: str = "robust",
) -> EstimateReport:
    """Plurality voting on pairwise ratio agreement, then post-selection TSLS.

    With ``dataset`` the final estimate is TSLS on the individual data;
    otherwise the summary-statistic minimum-distance analogue is used.
    """
    _first_stage_warning(fit)
    H = voting_matrix(fit, alpha)
    V = H.selected()
    diagnostics = {
        "votes": H.votes.tolist(),
        "threshold": H.threshold_quantile,
    }
    return _post_selection("tsht", V, dataset, fit, cov_mode, alpha, diagnostics)


# ---------------------------------------------------------------------------
# Confidence-interval method


def max_overlap_sets(lower, upper):
    """All maximum-cardinality sets of closed intervals sharing a common point.

    For intervals on a line, pairwise overlap implies a common point, so the
    largest pairwise-overlapping family is the largest set active at one
    point of an endpoint sweep.  Starts sort before ends at equal
    coordinates so that touching intervals count as overlapping.

    Returns
    -------
    list of tuple of int
        Distinct maximal sets, each sorted, in sweep order.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    events = [(lo, 0, j) for j, lo in enumerate(lower)] + [(hi, 1, j) for j, hi in enumerate(upper)]
    events.sort()
    active = set()
    best = 0
    found = []
    for _, kind, j in events:
        if kind == 0:
            active.add(j)
            if len(active) > best:
                best = len(active)
                found = [tuple(sorted(active))]
            elif len(active) == best:
                s = tuple(sorted(active))
                if s not in found:
                    found.append(s)
        else:
            active.discard(j)
    return found


def cim_q_grid(p: int, size: int = CIM_GRID_SIZE):
    """Default working-interval multipliers from ``z_0.6`` to ``z_{1 - 0.025/p^2}``."""
    return np.linspace(normal_quantile(0.6), normal_quantile(1 - 0.025 / p**2), size)


def cim(
    dataset: IVDataset,
    q_grid=None,
    level: float | None = None,
    cov_mode: str = "robust",
    alpha: float = 0.05,
) -> EstimateReport:
    """Largest cluster of overlapping working intervals, tuned by downward testing.

    For each ``q`` the working intervals are ``ratio_j +- q * se_j``; the
    largest set with a common point is the candidate for that ``q`` (ties
    go to the smaller J statistic).  Candidates are screened by the J test
    from largest to smallest at ``level`` (default ``0.1 / log(n)``) and the
    accepted set feeds post-selection TSLS.
    """
    data = prepare(dataset)
    fit = fit_reduced_form(data, cov_mode)
    _first_stage_warning(fit)
    r = fit.ratios()
    se = fit.ratio_se()
    if q_grid is None:
        q_grid = cim_q_grid(fit.p)
    q_grid = np.sort(np.asarray(q_grid, dtype=float))
    if level is None:
        level = default_level(data.n)

    j_cache = {}

    def j_stat(s):
        if s not in j_cache:
            j_cache[s] = j_test(data, s, cov_mode)[0] if len(s) >= 2 else 0.0
        return j_cache[s]

    per_q = []
    for q in q_grid:
        sets = max_overlap_sets(r - q * se, r + q * se)
        per_q.append(min(sets, key=lambda s: (j_stat(s), s)))
    unique = []
    for s in per_q:
        if s not in unique:
            unique.append(s)
    candidates = sorted(unique, key=lambda s: (-len(s), j_stat(s), s))
    result = downward_testing(candidates, data, level, cov_mode)
    diagnostics = {
        "q_selected": [float(q) for q, s in zip(q_grid, per_q) if s == result.valid_set],
        "j_level": level,
        "j_p_value": result.p_value,
        "downward_test_passed": result.passed,
    }
    return _post_selection("cim", result.valid_set, data, fit, cov_mode, alpha, diagnostics)
