"""Point estimators of beta in the linear model with possibly invalid instruments.

All estimators work on centered data.  The Lasso-type estimators never form
``n x n`` projection matrices: the first-step objective

    0.5 * || (P_Z - P_{P_Z D}) (Y - Z pi) ||^2

is a quadratic in ``pi`` whose Gram matrix and linear term are built from
``Z'Z``, ``Z'D`` and ``Z'Y`` only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    IVDataset,
    EstimateReport,
    Moments,
    ReducedFormFit,
    fit_reduced_form,
    normal_quantile,
    prepare,
    wald_ci,
)
from .errors import (
    DegenerateK,
    EmptyValidSet,
    NonPositiveLambda,
    RankDeficient,
)

WEIGHT_CAP = 1e12
CD_TOL = 1e-9
CD_MAX_SWEEPS = 10_000
N_LAMBDAS = 100
LAMBDA_MIN_RATIO = 1e-3
CV_FOLDS = 10


def _as_index_set(valid_set, p):
    V = sorted({int(j) for j in valid_set})
    if not V:
        raise EmptyValidSet("the valid set must contain at least one instrument")
    if V[0] < 0 or V[-1] >= p:
        raise IndexError(f"valid-set indices must lie in 0..{p - 1}")
    return tuple(V)


# ---------------------------------------------------------------------------
# TSLS


@dataclass(frozen=True)
class _TSLSFit:
    theta: np.ndarray  # (beta, pi_{V^c})
    A: np.ndarray  # X' P_Z X
    invalid: tuple[int, ...]
    residuals: np.ndarray


def _tsls_fit(data: IVDataset, V) -> _TSLSFit:
    m = data.moments
    p = data.p
    Vc = tuple(j for j in range(p) if j not in set(V))
    Vc_idx = list(Vc)
    k = 1 + len(Vc)
    A = np.empty((k, k))
    A[0, 0] = m.DPD
    A[0, 1:] = A[1:, 0] = m.ZtD[Vc_idx]
    A[1:, 1:] = m.ZtZ[np.ix_(Vc_idx, Vc_idx)]
    b = np.concatenate([[m.DPY], m.ZtY[Vc_idx]])
    ev = np.linalg.eigvalsh(A)
    if ev[-1] <= 0 or ev[0] < 1e-16 * ev[-1]:
        raise RankDeficient("[P_Z D, Z_invalid] is collinear")
    theta = np.linalg.solve(A, b)
    resid = data.outcome - theta[0] * data.exposure
    if Vc_idx:
        resid = resid - data.instruments[:, Vc_idx] @ theta[1:]
    return _TSLSFit(theta=theta, A=A, invalid=Vc, residuals=resid)


def _tsls_cov(data: IVDataset, fit: _TSLSFit, cov_mode: str):
    n = data.n
    k = fit.A.shape[0]
    Ainv = np.linalg.inv(fit.A)
    u = fit.residuals
    dof = n - k - (1 if data.centered else 0)
    if cov_mode == "homoskedastic":
        return (u @ u / dof) * Ainv
    m = data.moments
    ZtX = np.column_stack([m.ZtD, m.ZtZ[:, list(fit.invalid)]])
    Xhat = data.instruments @ (m.ZtZ_inv @ ZtX)
    Xu = Xhat * u[:, None]
    meat = Xu.T @ Xu
    return (n / dof) * Ainv @ meat @ Ainv


def tsls(dataset: IVDataset, valid_set, cov_mode: str = "robust", alpha: float = 0.05) -> EstimateReport:
    """Two-stage least squares treating ``valid_set`` as the valid instruments.

    The remaining instruments enter the outcome equation as included
    regressors.  With every instrument valid the estimate reduces to
    ``(P_Z D)'Y / ||P_Z D||^2``.

    Parameters
    ----------
    dataset : IVDataset
    valid_set : iterable of int
        0-based instrument indices.
    cov_mode : {"robust", "homoskedastic"}
    alpha : float
        Level of the attached Wald interval.
    """
    data = prepare(dataset)
    V = _as_index_set(valid_set, data.p)
    fit = _tsls_fit(data, V)
    cov = _tsls_cov(data, fit, cov_mode)
    beta = float(fit.theta[0])
    se = float(math.sqrt(max(cov[0, 0], 0.0)))
    return EstimateReport(
        method="tsls",
        beta_hat=beta,
        se=se,
        ci=wald_ci(beta, se, alpha),
        valid_set=V,
        diagnostics={
            "pi_invalid": dict(zip((int(j) for j in fit.invalid), fit.theta[1:].tolist())),
            "cov_mode": cov_mode,
        },
    )


def ols(dataset: IVDataset, alpha: float = 0.05) -> EstimateReport:
    """Regression of ``Y`` on ``D`` ignoring the instruments (HC1 standard error)."""
    data = prepare(dataset)
    D, Y = data.exposure, data.outcome
    dd = float(D @ D)
    beta = float(D @ Y) / dd
    u = Y - beta * D
    n = data.n
    se = math.sqrt(n / (n - 2) * float(np.sum((D * u) ** 2))) / dd
    return EstimateReport("ols", beta, se, wald_ci(beta, se, alpha))


# ---------------------------------------------------------------------------
# Median and k-class


def median_estimator(fit: ReducedFormFit) -> EstimateReport:
    """Median of the per-instrument ratios ``Gamma_hat_j / gamma_hat_j``.

    Even ``p`` takes the midpoint of the two central ratios.  No standard
    error is attached: the limiting law is a biased order statistic.
    """
    r = fit.ratios()
    return EstimateReport(
        method="median",
        beta_hat=float(np.median(r)),
        diagnostics={"ratios": r.tolist()},
    )


def kclass_k(n: int, p: int) -> float:
    denom = 1 - p / n - 1 / n
    if denom <= 0:
        raise DegenerateK(f"k is undefined for n={n}, p={p}")
    return (1 - 1 / n) / denom


def kclass_estimator(dataset: IVDataset, k: float | None = None) -> EstimateReport:
    """k-class estimator ``D'(I - k M_Z)Y / D'(I - k M_Z)D``.

    ``k`` defaults to ``(1 - 1/n) / (1 - p/n - 1/n)``, which stays consistent
    when ``pi`` is orthogonal to ``gamma`` and ``p/n`` converges.
    """
    data = prepare(dataset)
    m = data.moments
    if k is None:
        k = kclass_k(data.n, data.p)
    # D'(I - k M_Z)Y = D'Y - k (D'Y - D'P_Z Y)
    num = m.DtY - k * (m.DtY - m.DPY)
    den = m.DtD - k * (m.DtD - m.DPD)
    return EstimateReport(
        method="kclass",
        beta_hat=float(num / den),
        diagnostics={"k": float(k)},
    )


# ---------------------------------------------------------------------------
# l1-penalized first step


def first_step_quadratic(m: Moments):
    """Gram matrix ``G`` and linear term ``c`` of the first-step objective.

    ``0.5 ||(P_Z - P_{P_Z D})(Y - Z pi)||^2 = const - c'pi + 0.5 pi'G pi``.
    """
    dpd = m.DPD
    G = m.ZtZ - np.outer(m.ZtD, m.ZtD) / dpd
    c = m.ZtY - m.ZtD * (m.DPY / dpd)
    return G, c


def plug_in_beta(m: Moments, pi):
    """``(P_Z D)'(Y - Z pi) / ||P_Z D||^2``."""
    return float((m.DPY - m.ZtD @ pi) / m.DPD)


def weighted_lasso(G, c, lam, weights, init=None, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS):
    """Cyclic coordinate descent for ``0.5 pi'G pi - c'pi + lam * sum_j w_j |pi_j|``.

    Stops when the largest coordinate change in a sweep is below ``tol``
    relative to the largest coefficient.
    """
    p = c.shape[0]
    pi = np.zeros(p) if init is None else np.array(init, dtype=float)
    grad = c - G @ pi
    diag = np.diag(G).copy()
    thresh = lam * np.asarray(weights, dtype=float)
    for _ in range(max_sweeps):
        max_change = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            rho = grad[j] + diag[j] * pi[j]
            if rho > thresh[j]:
                new = (rho - thresh[j]) / diag[j]
            elif rho < -thresh[j]:
                new = (rho + thresh[j]) / diag[j]
            else:
                new = 0.0
            delta = new - pi[j]
            if delta != 0.0:
                grad -= G[:, j] * delta
                pi[j] = new
                max_change = max(max_change, abs(delta))
        scale = max(float(np.max(np.abs(pi))), 1e-300)
        if max_change <= tol * scale:
            break
    return pi


def lambda_max(c, weights):
    return float(np.max(np.abs(c) / np.asarray(weights, dtype=float)))


@dataclass(frozen=True)
class LassoPath:
    """Solutions of the penalized first step along a decreasing ``lambda`` grid."""

    lambdas: np.ndarray
    pi_hats: np.ndarray
    beta_hats: np.ndarray

    def valid_sets(self, tol=0.0):
        return [tuple(int(j) for j in np.flatnonzero(np.abs(pi) <= tol)) for pi in self.pi_hats]


def lambda_grid(lam_max, n_lambdas=N_LAMBDAS, min_ratio=LAMBDA_MIN_RATIO):
    return np.geomspace(lam_max, lam_max * min_ratio, n_lambdas)


def _solve_path(G, c, weights, lambdas):
    pis = np.zeros((len(lambdas), c.shape[0]))
    pi = np.zeros(c.shape[0])
    for i, lam in enumerate(lambdas):
        pi = weighted_lasso(G, c, lam, weights, init=pi)
        pis[i] = pi
    return pis


def lasso_path(dataset: IVDataset, weights=None, lambdas=None) -> LassoPath:
    """Warm-started solution path; ``lambdas`` defaults to 100 log-spaced values."""
    data = prepare(dataset)
    m = data.moments
    G, c = first_step_quadratic(m)
    w = np.ones(data.p) if weights is None else np.asarray(weights, dtype=float)
    if lambdas is None:
        lambdas = lambda_grid(lambda_max(c, w))
    lambdas = np.asarray(lambdas, dtype=float)
    pis = _solve_path(G, c, w, lambdas)
    betas = np.array([plug_in_beta(m, pi) for pi in pis])
    return LassoPath(lambdas=lambdas, pi_hats=pis, beta_hats=betas)


def sisvive_objective(dataset: IVDataset, beta, pi, lam):
    """``0.5 ||P_Z(Y - D beta - Z pi)||^2 + lam ||pi||_1`` on centered data."""
    m = dataset.moments
    pi = np.asarray(pi, dtype=float)
    Ztr = m.ZtY - m.ZtD * beta - m.ZtZ @ pi
    return 0.5 * float(Ztr @ m.ZtZ_inv @ Ztr) + lam * float(np.sum(np.abs(pi)))


def _fold_moments(data: IVDataset, rows) -> Moments:
    Z = data.instruments[rows]
    D = data.exposure[rows]
    Y = data.outcome[rows]
    ZtZ = Z.T @ Z
    return Moments(
        n=len(rows),
        ZtZ=ZtZ,
        ZtD=Z.T @ D,
        ZtY=Z.T @ Y,
        DtD=float(D @ D),
        DtY=float(D @ Y),
        YtY=float(Y @ Y),
        ZtZ_inv=np.linalg.inv(ZtZ),
    )


def _complement_moments(full: Moments, part: Moments) -> Moments:
    ZtZ = full.ZtZ - part.ZtZ
    return Moments(
        n=full.n - part.n,
        ZtZ=ZtZ,
        ZtD=full.ZtD - part.ZtD,
        ZtY=full.ZtY - part.ZtY,
        DtD=full.DtD - part.DtD,
        DtY=full.DtY - part.DtY,
        YtY=full.YtY - part.YtY,
        ZtZ_inv=np.linalg.inv(ZtZ),
    )


def _heldout_loss(m: Moments, pis):
    """First-step objective ``||(P_Z - P_{P_Z D})(Y - Z pi)||^2`` on held-out moments."""
    Ztr = m.ZtY[None, :] - pis @ m.ZtZ  # rows: Z'(Y - Z pi)
    proj = np.einsum("ij,jk,ik->i", Ztr, m.ZtZ_inv, Ztr)
    dhat_r = Ztr @ (m.ZtZ_inv @ m.ZtD)
    return proj - dhat_r**2 / m.DPD


def cross_validate_lambda(data: IVDataset, weights, lambdas, folds=CV_FOLDS, seed=0):
    """Held-out first-step loss per fold (rows) and ``lambda`` (columns)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    full = data.moments
    losses = np.zeros((folds, len(lambdas)))
    for k, test in enumerate(np.array_split(perm, folds)):
        mt = _fold_moments(data, test)
        mtr = _complement_moments(full, mt)
        G, c = first_step_quadratic(mtr)
        pis = _solve_path(G, c, weights, lambdas)
        losses[k] = _heldout_loss(mt, pis)
    return losses


def one_se_index(losses):
    """Largest-penalty index whose mean loss is within one standard error of the minimum.

    ``losses`` has one row per fold and columns ordered by decreasing penalty.
    """
    mean = losses.mean(axis=0)
    se = losses.std(axis=0, ddof=1) / math.sqrt(losses.shape[0])
    best = int(np.argmin(mean))
    return int(np.flatnonzero(mean <= mean[best] + se[best])[0])


def sisvive(dataset: IVDataset, lam: float | None = None, seed: int = 0, folds: int = CV_FOLDS) -> EstimateReport:
    """l1-penalized joint estimate of ``(beta, pi)``.

    Uses the two-step form: a Lasso for ``pi`` with design
    ``(P_Z - P_{P_Z D})Z``, then the plug-in ``beta``.  Without ``lam`` the
    penalty is chosen by ``folds``-fold cross-validation on the held-out
    first-step objective over a 100-point log grid, using the
    one-standard-error rule: the objective is flat in ``lambda`` near zero,
    where ``(beta, pi)`` is no longer identified.
    """
    data = prepare(dataset)
    m = data.moments
    G, c = first_step_quadratic(m)
    w = np.ones(data.p)
    diagnostics = {}
    if lam is None:
        lambdas = lambda_grid(lambda_max(c, w))
        losses = cross_validate_lambda(data, w, lambdas, folds=folds, seed=seed)
        best = one_se_index(losses)
        lam = float(lambdas[best])
        diagnostics["cv_index"] = best
        diagnostics["lambda_max"] = float(lambdas[0])
    elif not lam > 0:
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")
    pi = weighted_lasso(G, c, lam, w)
    beta = plug_in_beta(m, pi)
    diagnostics.update(lam=float(lam), pi_hat=pi.tolist())
    return EstimateReport(
        method="sisvive",
        beta_hat=beta,
        valid_set=tuple(int(j) for j in np.flatnonzero(pi == 0.0)),
        diagnostics=diagnostics,
    )


def adaptive_lasso(
    dataset: IVDataset,
    level: float | None = None,
    cov_mode: str = "robust",
    alpha: float = 0.05,
) -> EstimateReport:
    """Adaptive Lasso with median-estimator weights and downward-testing tuning.

    Penalty weights are ``1/|pi_med_j|`` with ``pi_med = Gamma_hat -
    gamma_hat * beta_med``, capped at ``1e12``.  Candidate valid sets along
    the penalty path are screened by the J test from largest to smallest;
    ``level`` defaults to ``0.1 / log(n)``.  The point estimate is the
    plug-in at the smallest penalty that yields the selected set, and the
    standard error is that of post-selection TSLS.
    """
    from .selection import downward_testing

    data = prepare(dataset)
    m = data.moments
    rf = fit_reduced_form(data, cov_mode)
    beta_med = median_estimator(rf).beta_hat
    pi_med = rf.Gamma_hat - rf.gamma_hat * beta_med
    with np.errstate(divide="ignore"):
        weights = np.minimum(1.0 / np.abs(pi_med), WEIGHT_CAP)
    capped = [int(j) for j in np.flatnonzero(weights >= WEIGHT_CAP)]
    G, c = first_step_quadratic(m)
    lambdas = lambda_grid(lambda_max(c, weights))
    pis = _solve_path(G, c, weights, lambdas)
    sets = [tuple(int(j) for j in np.flatnonzero(pi == 0.0)) for pi in pis]

    candidates = []
    for s in sorted(set(sets), key=lambda s: (-len(s), sets.index(s))):
        if s:
            candidates.append(s)
    if level is None:
        level = 0.1 / math.log(data.n)
    result = downward_testing(candidates, data, level, cov_mode=cov_mode)
    V = result.valid_set
    last = max(i for i, s in enumerate(sets) if s == V)
    beta = plug_in_beta(m, pis[last])
    post = tsls(data, V, cov_mode=cov_mode, alpha=alpha)
    return EstimateReport(
        method="adaptive_lasso",
        beta_hat=beta,
        se=post.se,
        ci=wald_ci(beta, post.se, alpha),
        valid_set=V,
        diagnostics={
            "lam": float(lambdas[last]),
            "beta_median": beta_med,
            "beta_post_tsls": post.beta_hat,
            "capped_weights": capped,
            "j_level": level,
            "j_p_value": result.p_value,
            "downward_test_passed": result.passed,
        },
    )


def oracle_z(alpha, p):
    return normal_quantile(1 - alpha / (2 * p))
