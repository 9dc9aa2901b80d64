"""Estimators identified by heteroskedasticity: GENIUS moments and the MiSTERI likelihood."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .core import EstimateReport, IVDataset, prepare, wald_ci
from .errors import (
    Homoskedastic,
    HomoskedasticExposure,
    IdentificationWeak,
    NumericalOverflow,
    OptimizerDiverged,
)

GENIUS_VARIANTS = ("gmm_mean", "sumsq")
HOMOSKEDASTIC_LEVEL = 0.05
VAR_BOUNDS = (1e-12, 1e12)
LOG_CHI2_1_MEAN = -1.2703628454614782  # E[log chi2_1] = -(euler_gamma + log 2)
N_STARTS = 5
IDENTIFICATION_LEVEL = 0.01
GRAD_TOL = 1e-8


# ---------------------------------------------------------------------------
# GENIUS


def _ols_f_test(y, X):
    """F statistic and p-value for the slopes of ``y`` on ``[1, X]``."""
    n, k = X.shape
    A = np.column_stack([np.ones(n), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    if rss <= 0:
        return math.inf, 0.0
    F = ((tss - rss) / k) / (rss / (n - k - 1))
    return float(F), float(stats.f.sf(F, k, n - k - 1))


def genius(dataset: IVDataset, variant: str = "gmm_mean", alpha: float = 0.05) -> EstimateReport:
    """Moment estimator built from the interaction instruments ``(Z - Zbar)(D - Z gamma_hat)``.

    ``gmm_mean`` solves the averaged moments by identity-weighted GMM,
    ``beta = b'a / b'b`` with ``a = mean(h Y)``, ``b = mean(h D)``.
    ``sumsq`` minimizes the per-observation sum of squared moments, whose
    minimizer is ``sum w Y D / sum w D^2`` with ``w_i = ||h_i||^2``.
    Standard errors come from the influence function, which accounts for
    estimating ``gamma``, the exposure intercept and the instrument means.
    """
    if variant not in GENIUS_VARIANTS:
        raise ValueError(f"variant must be one of {GENIUS_VARIANTS}")
    data = prepare(dataset)
    Z, D, Y = data.instruments, data.exposure, data.outcome
    n, p = Z.shape
    m = data.moments
    gamma = m.gamma_hat
    r = D - Z @ gamma
    h = Z * r[:, None]
    S_inv = m.ZtZ_inv * n  # (Z'Z/n)^{-1}
    hetero_f, hetero_p = _ols_f_test(r**2, Z)
    if hetero_p > HOMOSKEDASTIC_LEVEL:
        warnings.warn(
            f"exposure residual variance shows no dependence on the instruments (p = {hetero_p:.3f}); "
            "identification relies on heteroskedasticity",
            Homoskedastic,
            stacklevel=2,
        )

    # magnitudes that do not shrink with r, so an exactly linear exposure is caught
    z_scale = float(np.mean(np.sum(Z**2, axis=1)))
    d_scale = float(np.mean(D**2))
    if variant == "gmm_mean":
        a = h.T @ Y / n
        b = h.T @ D / n
        bb = float(b @ b)
        scale = z_scale * d_scale**2
        if bb <= 1e-24 * scale:
            raise HomoskedasticExposure("interaction instruments are uncorrelated with the exposure")
        beta = float(b @ a) / bb
        u = Y - beta * D
        # influence of gamma_hat, the exposure intercept and the instrument means
        A_gamma = -(Z * u[:, None]).T @ Z / n  # d mean(h u) / d gamma
        c_int = -(Z * u[:, None]).mean(axis=0)  # d / d intercept
        c_mean = -float(np.mean(r * u))  # d / d mean(Z), times identity
        phi = h * u[:, None] + (Z * r[:, None]) @ (A_gamma @ S_inv).T + np.outer(r, c_int) + c_mean * Z
        infl = phi @ b / bb
        denom = bb
    else:
        w = np.sum(h**2, axis=1)
        denom = float(np.sum(w * D**2))
        scale = n * z_scale * d_scale**2
        if denom <= 1e-24 * scale:
            raise HomoskedasticExposure("interaction instruments are uncorrelated with the exposure")
        beta = float(np.sum(w * Y * D)) / denom
        u = Y - beta * D
        zz = np.sum(Z**2, axis=1)
        du = D * u
        # w_i = r_i^2 ||Z_i - mean||^2
        g_gamma = -2 * (Z * (du * r * zz)[:, None]).mean(axis=0)
        g_int = -2 * float(np.mean(du * r * zz))
        g_mean = -2 * (Z * (du * r**2)[:, None]).mean(axis=0)
        psi = w * du
        phi = psi + (Z * r[:, None]) @ (S_inv @ g_gamma) + g_int * r + Z @ g_mean
        infl = phi / (denom / n)
    se = math.sqrt(float(infl @ infl)) / n
    return EstimateReport(
        method="genius",
        beta_hat=beta,
        se=se,
        ci=wald_ci(beta, se, alpha),
        diagnostics={
            "variant": variant,
            "heteroskedasticity_f": hetero_f,
            "heteroskedasticity_p": hetero_p,
        },
    )


def genius_objective(dataset: IVDataset, beta):
    """``sum_i ||(Z_i - Zbar)(D_i - Z_i gamma_hat)(Y_i - beta D_i)||^2``."""
    data = prepare(dataset)
    Z, D, Y = data.instruments, data.exposure, data.outcome
    r = D - Z @ data.moments.gamma_hat
    w = np.sum(Z**2, axis=1) * r**2
    return float(np.sum(w * (Y - beta * D) ** 2))


# ---------------------------------------------------------------------------
# MiSTERI


@dataclass(frozen=True)
class MisteriParams:
    """Mean ``beta0 + beta D + Z pi + alpha D s`` with variance ``s = exp(eta0 + Z eta)``."""

    beta0: float
    beta: float
    pi: np.ndarray
    alpha: float
    eta0: float
    eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float).ravel())
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float).ravel())
        if self.pi.shape != self.eta.shape:
            raise ValueError("pi and eta must have the same length")

    @property
    def p(self):
        return self.pi.size

    def to_vector(self):
        """Order ``(beta0, beta, pi, alpha, eta0, eta)``."""
        return np.concatenate([[self.beta0, self.beta], self.pi, [self.alpha, self.eta0], self.eta])

    @classmethod
    def from_vector(cls, theta, p):
        theta = np.asarray(theta, dtype=float)
        return cls(
            beta0=float(theta[0]),
            beta=float(theta[1]),
            pi=theta[2 : 2 + p],
            alpha=float(theta[2 + p]),
            eta0=float(theta[3 + p]),
            eta=theta[4 + p : 4 + 2 * p],
        )

    @staticmethod
    def labels(p):
        return (
            ["beta0", "beta"]
            + [f"pi{j + 1}" for j in range(p)]
            + ["alpha", "eta0"]
            + [f"eta{j + 1}" for j in range(p)]
        )


def _misteri_arrays(dataset: IVDataset):
    """Raw (uncentered) columns; covariates join the instruments as extra terms."""
    Z = dataset.instruments
    if dataset.covariates is not None:
        Z = np.column_stack([Z, dataset.covariates])
    return dataset.outcome, dataset.exposure, Z


def _loglik(theta, Y, D, Z):
    n, p = Z.shape
    P = MisteriParams.from_vector(theta, p)
    lin = P.eta0 + Z @ P.eta
    if lin.max() > math.log(VAR_BOUNDS[1]) or lin.min() < math.log(VAR_BOUNDS[0]):
        raise NumericalOverflow("variance exp(eta0 + Z eta) left [1e-12, 1e12]")
    s = np.exp(lin)
    mu = P.beta0 + P.beta * D + Z @ P.pi + P.alpha * D * s
    r = Y - mu
    rs = r / s
    value = float(np.sum(-0.5 * math.log(2 * math.pi) - 0.5 * lin - 0.5 * r * rs))
    common = -0.5 + 0.5 * r * rs + P.alpha * D * r
    grad = np.concatenate(
        [
            [rs.sum(), rs @ D],
            Z.T @ rs,
            [r @ D, common.sum()],
            Z.T @ common,
        ]
    )
    return value, grad


def misteri_loglik(params: MisteriParams, dataset: IVDataset):
    """Gaussian log-likelihood of the MiSTERI outcome model and its analytic gradient.

    Returns
    -------
    value : float
    gradient : ndarray
        In the order of :meth:`MisteriParams.to_vector`.
    """
    Y, D, Z = _misteri_arrays(dataset)
    if Z.shape[1] != params.p:
        raise ValueError(f"parameters have p={params.p}, data has {Z.shape[1]} columns")
    return _loglik(params.to_vector(), Y, D, Z)


def _initial_values(Y, D, Z):
    n, p = Z.shape
    X = np.column_stack([np.ones(n), D, Z])
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    res = Y - X @ coef
    logr2 = np.log(np.maximum(res**2, 1e-300))
    A = np.column_stack([np.ones(n), Z])
    eta, *_ = np.linalg.lstsq(A, logr2, rcond=None)
    eta[0] -= LOG_CHI2_1_MEAN
    return np.concatenate([coef[:2], coef[2:], [0.0], eta])


def _numerical_hessian(theta, Y, D, Z):
    k = theta.size
    H = np.zeros((k, k))
    for i in range(k):
        h = 1e-5 * max(1.0, abs(theta[i]))
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        H[:, i] = (_loglik(up, Y, D, Z)[1] - _loglik(dn, Y, D, Z)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def misteri_fit(dataset: IVDataset, seed=0, n_starts: int = N_STARTS, alpha: float = 0.05) -> EstimateReport:
    """Maximum likelihood for the MiSTERI model.

    BFGS on the mean log-likelihood with analytic gradients from ``n_starts``
    starting points (the OLS-based initializer plus jittered copies); the
    best likelihood wins.  Standard errors come from the inverse observed
    information, obtained by differencing the analytic gradient.  The
    exposure enters on its original scale, since the ``alpha D s`` term is
    not invariant to shifting ``D``.
    """
    Y, D, Z = _misteri_arrays(dataset)
    n, p = Z.shape
    k = 2 * p + 4
    if n < 10 * k:
        raise ValueError(f"need n >= {10 * k} rows for {k} parameters")
    base = _initial_values(Y, D, Z)
    rng = np.random.default_rng(seed)
    starts = [base] + [base + rng.normal(0.0, 0.1, size=k) for _ in range(n_starts - 1)]

    def objective(theta):
        try:
            v, g = _loglik(theta, Y, D, Z)
        except NumericalOverflow:
            return math.inf, np.zeros_like(theta)
        return -v / n, -g / n

    best = None
    for x0 in starts:
        if not np.isfinite(objective(x0)[0]):
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize(objective, x0, jac=True, method="BFGS", options={"gtol": GRAD_TOL, "maxiter": 2000})
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise OptimizerDiverged("no starting point produced a finite likelihood")
    theta = best.x
    value, grad = _loglik(theta, Y, D, Z)
    grad_norm = float(np.max(np.abs(grad))) / n
    if grad_norm > 1e-4:
        raise OptimizerDiverged(f"optimizer stopped with gradient max-norm {grad_norm:.2e}")
    info = -_numerical_hessian(theta, Y, D, Z)
    eig = np.linalg.eigvalsh(info)
    cov = np.linalg.pinv(info, hermitian=True)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    eta_idx = np.arange(4 + p, 4 + 2 * p)
    eta = theta[eta_idx]
    cov_eta = cov[np.ix_(eta_idx, eta_idx)]
    wald = float(eta @ np.linalg.pinv(cov_eta, hermitian=True) @ eta)
    wald_p = float(stats.chi2.sf(wald, p))
    if wald_p > IDENTIFICATION_LEVEL:
        warnings.warn(
            f"variance slopes are not distinguishable from zero (p = {wald_p:.3f}); beta is weakly identified",
            IdentificationWeak,
            stacklevel=2,
        )
    params = MisteriParams.from_vector(theta, p)
    labels = MisteriParams.labels(p)
    beta, se_beta = params.beta, float(se[1])
    return EstimateReport(
        method="misteri",
        beta_hat=beta,
        se=se_beta,
        ci=wald_ci(beta, se_beta, alpha),
        diagnostics={
            "estimand": "average treatment effect on the treated",
            "loglik": value,
            "params": dict(zip(labels, theta.tolist())),
            "se": dict(zip(labels, se.tolist())),
            "eta_wald": wald,
            "eta_wald_p": wald_p,
            "min_information_eigenvalue": float(eig[0]),
            "converged": bool(best.success),
            "gradient_max_norm": grad_norm,
        },
    )
