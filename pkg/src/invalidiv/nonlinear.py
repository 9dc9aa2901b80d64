"""Estimators that exploit nonlinearity of the exposure model.

``tsci`` builds an instrument from the part of a flexible first-stage fit
that is not linear in ``Z`` and removes the self-fitting bias of the
learner.  ``g_interaction`` uses centered products of instrument columns as
instruments, which are valid whenever at least ``v`` of the original
instruments are valid and the instruments are mutually independent.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse, stats

from .core import EstimateReport, IVDataset, prepare, wald_ci
from .errors import (
    CombinatorialLimit,
    CorrelatedInstruments,
    SplitTooSmall,
    WeakCurvature,
    WeakCurvatureError,
    WeakInteractionInstrument,
)

LEARNERS = ("basis_spline", "polynomial", "random_forest")
MIN_TSCI_N = 200
CURVATURE_F_THRESHOLD = 10.0
CURVATURE_ERROR = 1e-8
MAX_BASIS_DIM = 100_000
INTERACTION_F_THRESHOLD = 4.0
CORRELATION_WARNING = 0.2
CHUNK_ROWS = 8192


def _orth(A, rtol=1e-10):
    """Orthonormal basis of the column space of ``A`` (SVD with relative cutoff)."""
    if A.shape[1] == 0:
        return np.zeros((A.shape[0], 0))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((A.shape[0], 0))
    return U[:, s > rtol * s[0]]


# ---------------------------------------------------------------------------
# Hat-matrix learners


@dataclass(frozen=True)
class HatMatrixFit:
    """First-stage fit on split A written as ``f_hat = Q @ D_A``.

    Exactly one of ``basis`` (orthonormal ``n1 x k``, so ``Q = basis basis'``)
    or ``sparse_q`` (symmetric sparse ``n1 x n1``) is set.
    """

    rows_a: np.ndarray
    rows_b: np.ndarray
    fitted_exposure: np.ndarray
    basis: np.ndarray | None = None
    sparse_q: sparse.csr_matrix | None = None

    @property
    def split_assignment(self):
        return self.rows_a, self.rows_b

    @property
    def n1(self):
        return self.rows_a.size

    def apply(self, x):
        """``Q @ x`` for a vector or matrix ``x`` with ``n1`` rows."""
        if self.basis is not None:
            return self.basis @ (self.basis.T @ x)
        return self.sparse_q @ x

    @property
    def q_matrix(self):
        """Dense ``Q``; only sensible for small ``n1``."""
        if self.basis is not None:
            return self.basis @ self.basis.T
        return self.sparse_q.toarray()

    def q_row_norms(self):
        """``||Q e_i||^2`` for every ``i``."""
        if self.basis is not None:
            return np.einsum("ij,ij->i", self.basis, self.basis)
        return np.asarray(self.sparse_q.multiply(self.sparse_q).sum(axis=1)).ravel()

    def trace(self):
        if self.basis is not None:
            return float(self.basis.shape[1])
        return float(self.sparse_q.diagonal().sum())


def _spline_features(Z_a, Z_b, n_knots=5, degree=3):
    from sklearn.preprocessing import SplineTransformer

    st = SplineTransformer(n_knots=n_knots, degree=degree, knots="quantile", extrapolation="linear")
    st.fit(Z_b)
    cols = [Z_a, st.transform(Z_a)]
    p = Z_a.shape[1]
    if p > 1:
        cols.append(np.column_stack([Z_a[:, j] * Z_a[:, k] for j, k in itertools.combinations(range(p), 2)]))
    return np.hstack(cols)


def _poly_features(Z_a, degree=2):
    from sklearn.preprocessing import PolynomialFeatures

    return PolynomialFeatures(degree=degree, include_bias=False).fit_transform(Z_a)


def _forest_q(Z_a, Z_b, D_b, seed, n_trees=50, min_leaf=5):
    """Honest forest weights: trees grown on split B, leaf averages over split A."""
    from sklearn.ensemble import RandomForestRegressor

    rf = RandomForestRegressor(
        n_estimators=n_trees,
        min_samples_leaf=min_leaf,
        max_features=1.0 / 3 if Z_a.shape[1] >= 3 else 1.0,
        random_state=seed,
    )
    rf.fit(Z_b, D_b)
    leaves = rf.apply(Z_a)  # (n1, T)
    n1, T = leaves.shape
    blocks = []
    for t in range(T):
        _, inv, counts = np.unique(leaves[:, t], return_inverse=True, return_counts=True)
        data = 1.0 / np.sqrt(T * counts[inv])
        blocks.append(sparse.csr_matrix((data, (np.arange(n1), inv)), shape=(n1, counts.size)))
    F = sparse.hstack(blocks).tocsr()
    return (F @ F.T).tocsr()


def fit_hat_matrix(data: IVDataset, rows_a, rows_b, learner="basis_spline", seed=0, **options) -> HatMatrixFit:
    """Fit the first-stage learner on split B and express it on split A."""
    Z_a = data.instruments[rows_a]
    Z_b = data.instruments[rows_b]
    D_a = data.exposure[rows_a]
    if learner == "random_forest":
        Q = _forest_q(Z_a, Z_b, data.exposure[rows_b], seed, **options)
        return HatMatrixFit(rows_a, rows_b, Q @ D_a, sparse_q=Q)
    if learner == "basis_spline":
        Phi = _spline_features(Z_a, Z_b, **options)
    elif learner == "polynomial":
        Phi = _poly_features(Z_a, **options)
    else:
        raise ValueError(f"unknown learner {learner!r}; choose from {LEARNERS}")
    Phi = Phi - Phi.mean(axis=0)
    U = _orth(np.hstack([Z_a, Phi]))
    return HatMatrixFit(rows_a, rows_b, U @ (U.T @ D_a), basis=U)


def tsci(
    dataset: IVDataset,
    learner: str = "basis_spline",
    split_fraction: float = 0.5,
    seed=0,
    alpha: float = 0.05,
    **learner_options,
) -> EstimateReport:
    """Bias-corrected curvature estimator with a sample-split first stage.

    Split A (a ``split_fraction`` share of rows) carries the estimation;
    split B trains the learner.  With ``M = Q' P^perp_{QZ} Q``,
    ``beta_tilde = Y'MD / D'MD`` and the estimate subtracts
    ``sum_i M_ii delta_i eps_i / D'MD``, where ``delta = D - QD`` and
    ``eps`` is the full-sample residual of ``Y - D beta_tilde`` on ``Z``.
    """
    data = prepare(dataset)
    n = data.n
    if n < MIN_TSCI_N:
        raise SplitTooSmall(f"need at least {MIN_TSCI_N} rows, got {n}")
    if not 0.2 < split_fraction < 0.8:
        raise SplitTooSmall("split_fraction must lie in (0.2, 0.8)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n1 = int(round(split_fraction * n))
    rows_a, rows_b = np.sort(perm[:n1]), np.sort(perm[n1:])
    hat = fit_hat_matrix(data, rows_a, rows_b, learner, seed=seed, **learner_options)

    Z_a = data.instruments[rows_a]
    D_a = data.exposure[rows_a]
    Y_a = data.outcome[rows_a]
    R = _orth(hat.apply(Z_a))

    def perp(x):
        return x - R @ (R.T @ x)

    QD = hat.fitted_exposure
    QY = hat.apply(Y_a)
    MD = hat.apply(perp(QD))
    DMD = float(QD @ perp(QD))
    if DMD / n1 < CURVATURE_ERROR:
        raise WeakCurvatureError(f"D'MD/n1 = {DMD / n1:.3g}: the first stage has no curvature")
    beta_tilde = float(QY @ perp(QD)) / DMD

    if hat.basis is not None:
        RU = hat.basis.T @ R
        M_diag = hat.q_row_norms() - np.sum((hat.basis @ RU) ** 2, axis=1)
    else:
        M_diag = hat.q_row_norms() - np.sum(np.asarray(hat.apply(R)) ** 2, axis=1)

    m = data.moments
    u_full = data.outcome - beta_tilde * data.exposure
    eps_full = u_full - data.instruments @ (m.ZtZ_inv @ (data.instruments.T @ u_full))
    eps = eps_full[rows_a]
    delta = D_a - QD
    beta = beta_tilde - float(np.sum(M_diag * delta * eps)) / DMD
    se = math.sqrt(float(np.sum(MD**2 * eps**2))) / DMD

    f_lin = Z_a @ np.linalg.lstsq(Z_a, QD, rcond=None)[0]
    curvature = float(np.mean((QD - f_lin) ** 2))
    trQ = hat.trace()
    sigma2 = float(delta @ delta) / max(n1 - trQ, 1.0)
    trM = float(M_diag.sum())
    curvature_f = DMD / (sigma2 * trM) if sigma2 > 0 and trM > 0 else math.inf
    if curvature_f < CURVATURE_F_THRESHOLD:
        warnings.warn(
            f"curvature F statistic {curvature_f:.2f} is below {CURVATURE_F_THRESHOLD}; "
            "the exposure model looks close to linear",
            WeakCurvature,
            stacklevel=2,
        )
    return EstimateReport(
        method="tsci",
        beta_hat=beta,
        se=se,
        ci=wald_ci(beta, se, alpha),
        diagnostics={
            "learner": learner,
            "beta_uncorrected": beta_tilde,
            "curvature": curvature,
            "curvature_f": curvature_f,
            "n1": n1,
        },
    )


# ---------------------------------------------------------------------------
# Interaction instruments


def interaction_subsets(p: int, v: int):
    """Subsets of size ``p - j`` for ``j = 0..v-1``, largest first."""
    return [C for j in range(v) for C in itertools.combinations(range(p), p - j)]


def interaction_dim(p: int, v: int) -> int:
    return sum(math.comb(p, j) for j in range(v))


@dataclass(frozen=True)
class InteractionBasis:
    """Centered-product instruments ``prod_{k in C} (Z_k - mean Z_k)``."""

    v: int
    columns: np.ndarray
    subset_index: tuple[tuple[int, ...], ...]

    @property
    def d(self):
        return len(self.subset_index)


def _products(Zc, subsets, cache=None):
    cache = {} if cache is None else cache
    out = np.empty((Zc.shape[0], len(subsets)))
    for i, C in enumerate(subsets):
        out[:, i] = _product(Zc, C, cache)
    return out


def _product(Zc, C, cache):
    """Row-wise product over columns ``C``, reusing cached sub-products."""
    if C in cache:
        return cache[C]
    if len(C) == 0:
        val = np.ones(Zc.shape[0])
    elif len(C) == 1:
        val = Zc[:, C[0]]
    else:
        val = _product(Zc, C[:-1], cache) * Zc[:, C[-1]]
    cache[C] = val
    return val


def _check_basis(p, v):
    if not 1 <= v <= p:
        raise ValueError(f"v must lie in 1..{p}")
    d = interaction_dim(p, v)
    if d > MAX_BASIS_DIM:
        raise CombinatorialLimit(f"interaction basis would have {d} columns")
    return d


def build_interaction_basis(dataset: IVDataset, v: int) -> InteractionBasis:
    """All centered products over instrument subsets of size ``p - j``, ``j < v``.

    Column means stand in for the instrument expectations.
    """
    Z = np.asarray(dataset.instruments, dtype=float)
    p = Z.shape[1]
    _check_basis(p, v)
    Zc = Z - Z.mean(axis=0)
    subsets = interaction_subsets(p, v)
    return InteractionBasis(v=v, columns=_products(Zc, subsets), subset_index=tuple(subsets))


def _max_abs_correlation(Z):
    if Z.shape[1] < 2:
        return 0.0
    C = np.corrcoef(Z, rowvar=False)
    np.fill_diagonal(C, 0.0)
    return float(np.max(np.abs(C)))


def g_interaction(dataset: IVDataset, v: int, alpha: float = 0.05, chunk_rows: int = CHUNK_ROWS) -> EstimateReport:
    """Identity-weighted GMM on ``E[h(Z)(Y - beta D)] = 0`` with interaction instruments ``h``.

    ``beta_hat = (H'D)'(H'Y) / ||H'D||^2`` with uncentered ``Y`` and ``D``
    (covariates, when present, are partialled out first).  The standard error is the
    sandwich for this estimating equation including the effect of replacing
    instrument means by column means.  Rows are streamed in chunks so the
    ``n x d`` basis is never held in memory.
    """
    data = prepare(dataset)
    if dataset.covariates is None:
        # raw outcome and exposure: E[h] = 0 makes an intercept harmless
        data = dataset
    Z = data.instruments
    n, p = Z.shape
    d = _check_basis(p, v)
    Zc = Z - Z.mean(axis=0)
    Y, D = data.outcome, data.exposure
    subsets = interaction_subsets(p, v)
    corr = _max_abs_correlation(Z)
    if corr > CORRELATION_WARNING:
        warnings.warn(
            f"instrument correlation {corr:.2f} exceeds {CORRELATION_WARNING}; "
            "interaction instruments assume independent instruments",
            CorrelatedInstruments,
            stacklevel=2,
        )

    HtD = np.zeros(d)
    HtY = np.zeros(d)
    HtH = np.zeros((d, d))
    for a in range(0, n, chunk_rows):
        H = _products(Zc[a : a + chunk_rows], subsets)
        HtD += H.T @ D[a : a + chunk_rows]
        HtY += H.T @ Y[a : a + chunk_rows]
        HtH += H.T @ H
    q = HtD / n
    qq = float(q @ q)
    beta = float(q @ (HtY / n)) / qq

    # Derivative of the mean moment with respect to the instrument means:
    # d/dmean_k prod_{l in C}(Z_l - mean_l) = -prod_{l in C, l != k}(Z_l - mean_l).
    sub_index = {}
    for C in subsets:
        for k in C:
            S = tuple(l for l in C if l != k)
            sub_index.setdefault(S, len(sub_index))
    sub_list = list(sub_index)
    sub_means = np.zeros(len(sub_list))
    score = np.zeros(n)
    for a in range(0, n, chunk_rows):
        rows = slice(a, a + chunk_rows)
        u = Y[rows] - beta * D[rows]
        cache = {}
        Zr = Zc[rows]
        H = _products(Zr, subsets, cache)
        score[rows] = (H @ q) * u
        for i, S in enumerate(sub_list):
            sub_means[i] += float(_product(Zr, S, cache) @ u)
    sub_means /= n
    B = np.zeros((d, p))
    for i, C in enumerate(subsets):
        for k in C:
            S = tuple(l for l in C if l != k)
            B[i, k] = -sub_means[sub_index[S]]
    score += Zc @ (B.T @ q)
    se = math.sqrt(float(score @ score)) / (n * qq)

    coef, *_ = np.linalg.lstsq(HtH, HtD, rcond=None)
    explained = float(HtD @ coef)
    rss = max(float(D @ D) - explained, np.finfo(float).tiny)
    F = (explained / d) / (rss / max(n - d, 1))
    if F < INTERACTION_F_THRESHOLD:
        warnings.warn(
            f"first-stage F of the interaction instruments is {F:.2f}; they are barely associated with the exposure",
            WeakInteractionInstrument,
            stacklevel=2,
        )
    return EstimateReport(
        method="g_interaction",
        beta_hat=beta,
        se=se,
        ci=wald_ci(beta, se, alpha),
        diagnostics={
            "v": v,
            "d": d,
            "first_stage_f": F,
            "first_stage_p": float(stats.f.sf(F, d, max(n - d, 1))),
            "max_instrument_correlation": corr,
        },
    )
