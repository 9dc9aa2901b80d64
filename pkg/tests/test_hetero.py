import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from invalidiv.core import IVDataset
from invalidiv.errors import (
    Homoskedastic,
    HomoskedasticExposure,
    IdentificationWeak,
    NumericalOverflow,
)
from invalidiv.hetero import MisteriParams, genius, genius_objective, misteri_fit, misteri_loglik
from invalidiv.linear import tsls
from invalidiv.simulation import SimScenario, generate


def hetero_data(seed, n=50_000, confounding=0.6, pi=0.3):
    sc = SimScenario(
        family="hetero_genius",
        n=n,
        p=3,
        gamma=(0.5, 0.5, 0.5),
        pi_spec={"invalid": [0, 1, 2], "magnitude": pi},
        extras={"theta": [0.5, 0.0, 0.0]},
        confounding=confounding,
        seed=seed,
    )
    return generate(sc)


def misteri_data(seed, n=50_000, eta=(0.5, -0.3)):
    sc = SimScenario(
        family="misteri",
        n=n,
        p=2,
        pi_spec={"invalid": [0, 1], "magnitude": [0.3, -0.2]},
        extras={"eta": list(eta), "alpha": 0.3},
        seed=seed,
    )
    return generate(sc)


def raw_moments(data, beta):
    """Per-row moments (Z_i - Zbar)(D_i - fitted D_i)(Y_i - beta D_i) on centered outcome and exposure."""
    Z = np.asarray(data.instruments)
    D = np.asarray(data.exposure)
    Y = np.asarray(data.outcome)
    A = np.column_stack([np.ones(len(D)), Z])
    r = D - A @ np.linalg.lstsq(A, D, rcond=None)[0]
    Zc = Z - Z.mean(axis=0)
    u = (Y - Y.mean()) - beta * (D - D.mean())
    return Zc * (r * u)[:, None]


# ---------------------------------------------------------------------------
# GENIUS


@pytest.mark.parametrize("seed", range(3))
def test_sumsq_matches_golden_section(seed):
    data, _ = hetero_data(seed, n=3000)
    rep = genius(data, variant="sumsq")

    def objective(b):
        g = raw_moments(data, b)
        return float(np.sum(g * g))

    res = optimize.minimize_scalar(objective, bracket=(0.0, 1.0, 3.0), method="golden", tol=1e-12)
    assert rep.beta_hat == pytest.approx(res.x, abs=1e-8)
    assert genius_objective(data, rep.beta_hat) == pytest.approx(objective(rep.beta_hat), rel=1e-10)


def test_gmm_mean_solves_averaged_moments():
    data, _ = hetero_data(4, n=3000)
    rep = genius(data)
    gbar = raw_moments(data, rep.beta_hat).mean(axis=0)
    b = raw_moments(data, 0.0).mean(axis=0) - raw_moments(data, 1.0).mean(axis=0)  # mean(h D)
    # first-order condition of ||mean g(beta)||^2
    assert abs(gbar @ b) < 1e-10 * np.linalg.norm(b) ** 2


def test_homoskedastic_exposure_warns():
    data, _ = generate(SimScenario(n=4000, p=3, seed=1))
    with pytest.warns(Homoskedastic):
        rep = genius(data)
    assert rep.diagnostics["heteroskedasticity_p"] > 0.05


@pytest.mark.parametrize("variant", ["gmm_mean", "sumsq"])
def test_exact_linear_exposure_is_error(variant):
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((500, 2))
    D = Z @ [0.5, 0.3]
    Y = D + rng.standard_normal(500)
    with pytest.raises(HomoskedasticExposure), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        genius(IVDataset(Y, D, Z), variant=variant)


def test_unknown_variant():
    with pytest.raises(ValueError):
        genius(hetero_data(0, n=500)[0], variant="median")


def test_moment_centered_at_truth_without_confounding():
    data, truth = hetero_data(7, n=100_000, confounding=0.0)
    g = raw_moments(data, truth.beta)
    mc_se = g.std(axis=0, ddof=1) / math.sqrt(len(g))
    assert np.all(np.abs(g.mean(axis=0)) < 3 * mc_se)


def test_relevance_tracks_variance_gradient():
    data, _ = hetero_data(8, n=400_000)
    Z, D = np.asarray(data.instruments), np.asarray(data.exposure)
    A = np.column_stack([np.ones(len(D)), Z])
    r = D - A @ np.linalg.lstsq(A, D, rcond=None)[0]
    var_dz = 1.0 + np.exp(0.5 * Z[:, 0])  # conditional variance of the generating process
    for j in range(3):
        zc = Z[:, j] - Z[:, j].mean()
        lhs = np.cov(zc * r, D)[0, 1]
        rhs = np.cov(zc, var_dz)[0, 1]
        assert abs(lhs - rhs) < 0.03


@pytest.mark.parametrize("variant", ["gmm_mean", "sumsq"])
def test_influence_se_matches_monte_carlo_spread(variant):
    est, ses = [], []
    for s in range(300):
        rep = genius(hetero_data(100 + s, n=20_000)[0], variant=variant)
        est.append(rep.beta_hat)
        ses.append(rep.se)
    assert np.median(ses) == pytest.approx(np.std(est), rel=0.2)


@pytest.mark.slow
def test_genius_consistent_where_tsls_is_biased():
    est, naive = [], []
    for s in range(100):
        data, _ = hetero_data(s)
        est.append(genius(data).beta_hat)
        naive.append(tsls(data, range(3)).beta_hat)
    assert abs(np.mean(est) - 1.0) < 0.05
    assert abs(np.mean(naive) - 1.0) > 0.2


# ---------------------------------------------------------------------------
# MiSTERI likelihood


def test_loglik_homoskedastic_reduction():
    data, _ = misteri_data(0, n=500)
    params = MisteriParams(beta0=0.2, beta=0.9, pi=[0.0, 0.0], alpha=0.0, eta0=0.4, eta=[0.0, 0.0])
    value, _ = misteri_loglik(params, data)
    mu = 0.2 + 0.9 * np.asarray(data.exposure)
    expected = stats.norm.logpdf(np.asarray(data.outcome), mu, math.exp(0.2)).sum()
    assert value == pytest.approx(expected, rel=1e-12)


def test_loglik_zero_residuals():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((200, 2))
    D = (rng.uniform(size=200) < 0.5).astype(float)
    P = MisteriParams(beta0=0.1, beta=1.0, pi=[0.3, -0.2], alpha=0.4, eta0=-0.3, eta=[0.2, 0.1])
    lin = P.eta0 + Z @ P.eta
    Y = P.beta0 + P.beta * D + Z @ P.pi + P.alpha * D * np.exp(lin)
    value, grad = misteri_loglik(P, IVDataset(Y, D, Z))
    assert value == pytest.approx(np.sum(-0.5 * math.log(2 * math.pi) - 0.5 * lin), rel=1e-12)
    # mean-parameter scores vanish with zero residuals
    assert np.max(np.abs(grad[:4])) < 1e-9 and abs(grad[4]) < 1e-9


def test_loglik_gradient_finite_differences():
    data, _ = misteri_data(2, n=400)
    rng = np.random.default_rng(5)
    for _ in range(20):
        theta = rng.normal(0, 0.5, 8)
        P = MisteriParams.from_vector(theta, 2)
        _, grad = misteri_loglik(P, data)
        for i in range(8):
            h = 1e-6
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (
                misteri_loglik(MisteriParams.from_vector(up, 2), data)[0]
                - misteri_loglik(MisteriParams.from_vector(dn, 2), data)[0]
            ) / (2 * h)
            assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1.0)


dyadic = st.integers(-16, 16).map(lambda k: k / 16)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(dyadic, min_size=3, max_size=3), st.lists(dyadic, min_size=3, max_size=3), st.permutations(range(3)))
def test_loglik_permutation_invariance(seed, pi, eta, perm):
    rng = np.random.default_rng(seed)
    Z = rng.integers(-2, 3, size=(64, 3)).astype(float)
    D = rng.integers(0, 2, size=64).astype(float)
    Y = rng.integers(-4, 5, size=64).astype(float)
    P = MisteriParams(beta0=0.25, beta=0.5, pi=pi, alpha=0.125, eta0=0.0, eta=eta)
    perm = list(perm)
    Pp = MisteriParams(beta0=0.25, beta=0.5, pi=np.asarray(pi)[perm], alpha=0.125, eta0=0.0, eta=np.asarray(eta)[perm])
    v1, g1 = misteri_loglik(P, IVDataset(Y, D, Z))
    v2, g2 = misteri_loglik(Pp, IVDataset(Y, D, Z[:, perm]))
    assert v1 == v2
    # gradient sums run through BLAS, whose summation order depends on memory layout
    np.testing.assert_allclose(g2[2:5], g1[2:5][perm], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g2[7:], g1[7:][perm], rtol=1e-12, atol=1e-12)


def test_overflow_guard():
    data, _ = misteri_data(0, n=300)
    P = MisteriParams(beta0=0.0, beta=1.0, pi=[0.0, 0.0], alpha=0.0, eta0=40.0, eta=[0.0, 0.0])
    with pytest.raises(NumericalOverflow):
        misteri_loglik(P, data)


def test_params_round_trip():
    P = MisteriParams(beta0=1.0, beta=2.0, pi=[3.0, 4.0], alpha=5.0, eta0=6.0, eta=[7.0, 8.0])
    assert np.array_equal(MisteriParams.from_vector(P.to_vector(), 2).to_vector(), P.to_vector())
    assert MisteriParams.labels(2)[1] == "beta"
    with pytest.raises(ValueError):
        MisteriParams(0.0, 1.0, [1.0], 0.0, 0.0, [1.0, 2.0])


# ---------------------------------------------------------------------------
# MiSTERI fit


def test_fit_well_identified():
    data, truth = misteri_data(3, n=20_000)
    rep = misteri_fit(data)
    assert rep.diagnostics["min_information_eigenvalue"] > 0
    assert rep.diagnostics["gradient_max_norm"] < 1e-6
    assert rep.diagnostics["estimand"] == "average treatment effect on the treated"
    assert abs(rep.beta_hat - truth.beta) < 4 * rep.se


def test_fit_without_variance_slopes_warns():
    data, _ = misteri_data(4, n=5000, eta=(0.0, 0.0))
    with pytest.warns(IdentificationWeak):
        misteri_fit(data)


def test_fit_needs_enough_rows():
    data, _ = misteri_data(0, n=70)
    with pytest.raises(ValueError):
        misteri_fit(data)


def test_fit_seeded():
    data, _ = misteri_data(5, n=3000)
    assert misteri_fit(data, seed=2).beta_hat == misteri_fit(data, seed=2).beta_hat


@pytest.mark.slow
def test_misteri_consistent_where_tsls_is_biased():
    est, naive = [], []
    for s in range(100):
        data, _ = misteri_data(1000 + s)
        est.append(misteri_fit(data, seed=s).beta_hat)
        naive.append(tsls(data, range(2)).beta_hat)
    assert abs(np.mean(est) - 1.0) < 0.05
    assert abs(np.mean(naive) - 1.0) > 0.1
