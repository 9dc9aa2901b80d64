import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invalidiv.core import IVDataset, prepare
from invalidiv.errors import (
    CombinatorialLimit,
    CorrelatedInstruments,
    SplitTooSmall,
    WeakCurvature,
    WeakCurvatureError,
    WeakInteractionInstrument,
)
from invalidiv.linear import tsls
from invalidiv.nonlinear import (
    build_interaction_basis,
    fit_hat_matrix,
    g_interaction,
    interaction_dim,
    tsci,
)
from invalidiv.simulation import SimScenario, generate

PI3 = {"invalid": [0, 1, 2], "magnitude": [0.3, -0.2, 0.4]}


def quadratic(seed, n=20_000, noiseless=False):
    sc = SimScenario(
        family="nonlinear",
        n=n,
        p=3,
        gamma=(1.0, 0.0, 0.0),
        pi_spec=PI3,
        extras={"form": "quadratic", "strength": 0.5},
        seed=seed,
        noiseless=noiseless,
    )
    return generate(sc)


def interaction(seed, n=50_000):
    sc = SimScenario(
        family="nonlinear",
        n=n,
        p=2,
        pi_spec={"invalid": [0, 1], "magnitude": [0.3, -0.2]},
        extras={"form": "interaction", "strength": 0.5},
        seed=seed,
    )
    return generate(sc)


def split(n, frac=0.5, seed=0):
    perm = np.random.default_rng(seed).permutation(n)
    k = int(n * frac)
    return np.sort(perm[:k]), np.sort(perm[k:])


# ---------------------------------------------------------------------------
# Hat matrices


@pytest.mark.parametrize("learner", ["basis_spline", "polynomial"])
def test_basis_learners_give_projections(learner):
    data = prepare(quadratic(0, n=600)[0])
    a, b = split(600)
    hat = fit_hat_matrix(data, a, b, learner)
    Q = hat.q_matrix
    assert np.max(np.abs(Q @ Q - Q)) < 1e-8
    assert np.max(np.abs(Q - Q.T)) < 1e-12
    np.testing.assert_allclose(hat.fitted_exposure, Q @ data.exposure[a], atol=1e-10)
    assert hat.split_assignment[0] is a


def test_forest_weights_represent_fit():
    data = prepare(quadratic(1, n=600)[0])
    a, b = split(600)
    hat = fit_hat_matrix(data, a, b, "random_forest", seed=3)
    Q = hat.q_matrix
    np.testing.assert_allclose(hat.fitted_exposure, Q @ data.exposure[a], atol=1e-12)
    np.testing.assert_allclose(Q, Q.T, atol=1e-12)
    np.testing.assert_allclose(hat.q_row_norms(), np.sum(Q**2, axis=1), rtol=1e-10)
    assert hat.trace() == pytest.approx(np.trace(Q))


def test_unknown_learner():
    data = prepare(quadratic(1, n=300)[0])
    a, b = split(300)
    with pytest.raises(ValueError):
        fit_hat_matrix(data, a, b, "neural_net")


# ---------------------------------------------------------------------------
# TSCI


def test_tsci_linear_exposure_warns():
    data, _ = generate(SimScenario(n=2000, p=3, pi_spec=PI3, seed=2))
    with pytest.warns(WeakCurvature):
        rep = tsci(data)
    # what remains is spline overfit of the noise, small next to Var(D)
    assert rep.diagnostics["curvature_f"] < 10
    assert rep.diagnostics["curvature"] < 0.05 * np.var(data.exposure)


def test_tsci_exactly_linear_exposure_is_error():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((400, 3))
    D = Z @ [0.5, 0.4, 0.3]
    Y = D + Z @ [0.1, 0.2, 0.3] + rng.standard_normal(400)
    with pytest.raises(WeakCurvatureError):
        tsci(IVDataset(Y, D, Z))


def test_tsci_exact_recovery_with_polynomial_learner():
    data, truth = quadratic(3, n=1000, noiseless=True)
    rep = tsci(data, learner="polynomial")
    assert rep.beta_hat == pytest.approx(truth.beta, abs=1e-6)


@pytest.mark.parametrize("kwargs", [dict(), dict(split_fraction=0.9)])
def test_tsci_split_guards(kwargs):
    n = 150 if not kwargs else 1000
    data, _ = quadratic(0, n=n)
    with pytest.raises(SplitTooSmall):
        tsci(data, **kwargs)


def test_tsci_seeded():
    data, _ = quadratic(5, n=2000)
    assert tsci(data, seed=4).beta_hat == tsci(data, seed=4).beta_hat


@pytest.mark.parametrize("learner", ["basis_spline", "polynomial", "random_forest"])
def test_tsci_learners_near_truth(learner):
    data, truth = quadratic(6, n=5000)
    rep = tsci(data, learner=learner, seed=1)
    assert abs(rep.beta_hat - truth.beta) < 5 * rep.se
    assert rep.diagnostics["learner"] == learner


@pytest.mark.slow
def test_tsci_consistent_where_tsls_is_biased():
    est, naive = [], []
    for s in range(100):
        data, _ = quadratic(s)
        est.append(tsci(data, seed=s).beta_hat)
        naive.append(tsls(data, range(3)).beta_hat)
    assert abs(np.mean(est) - 1.0) < 0.05
    assert abs(np.mean(naive) - 1.0) > 0.2


# ---------------------------------------------------------------------------
# Interaction basis


def test_basis_two_instruments():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((50, 2))
    basis = build_interaction_basis(IVDataset(np.zeros(50), np.zeros(50), Z), 1)
    assert basis.d == 1 and basis.subset_index == ((0, 1),)
    expected = (Z[:, 0] - Z[:, 0].mean()) * (Z[:, 1] - Z[:, 1].mean())
    np.testing.assert_allclose(basis.columns[:, 0], expected, rtol=1e-14)


@pytest.mark.parametrize("p, v, d", [(10, 1, 1), (10, 2, 11), (2, 1, 1), (5, 3, 16), (4, 4, 15)])
def test_basis_dimension(p, v, d):
    assert interaction_dim(p, v) == d == sum(math.comb(p, j) for j in range(v))
    rng = np.random.default_rng(p * 10 + v)
    data = IVDataset(rng.standard_normal(40), rng.standard_normal(40), rng.standard_normal((40, p)))
    basis = build_interaction_basis(data, v)
    assert basis.columns.shape == (40, d)
    Zc = np.asarray(data.instruments) - np.asarray(data.instruments).mean(axis=0)
    for col, C in zip(basis.columns.T, basis.subset_index):
        np.testing.assert_allclose(col, np.prod(Zc[:, list(C)], axis=1), rtol=1e-12)


def test_basis_combinatorial_limit():
    rng = np.random.default_rng(0)
    data = IVDataset(rng.standard_normal(30), rng.standard_normal(30), rng.standard_normal((30, 24)))
    with pytest.raises(CombinatorialLimit):
        build_interaction_basis(data, 12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(-1000, 1000), st.integers(1, 4))
def test_basis_shift_invariance(seed, j, c, v):
    rng = np.random.default_rng(seed)
    Z = rng.integers(-8, 9, size=(32, 4)).astype(float)
    Z[:, 0] = np.arange(32) % 3  # keep every column non-constant
    data = IVDataset(np.zeros(32), np.zeros(32), Z)
    shifted = Z.copy()
    shifted[:, j] += c
    a = build_interaction_basis(data, v).columns
    b = build_interaction_basis(data.replace(instruments=shifted), v).columns
    assert np.array_equal(a, b)


def _factorial_design(levels, p, reps=1):
    return np.array(list(itertools.product(levels, repeat=p)) * reps, dtype=float)


def test_population_moment_identifies_beta():
    # every support point once: column means equal population means
    Z = _factorial_design([-1.0, 0.0, 1.0], 3)
    beta = 0.7
    D = Z @ [0.4, 0.3, 0.2] + 0.8 * Z[:, 0] * Z[:, 1] + 0.6 * Z[:, 0] * Z[:, 1] * Z[:, 2]
    Y = beta * D + Z @ [0.5, -0.3, 0.2]
    data = IVDataset(Y, D, Z)
    for v in (1, 2):
        H = build_interaction_basis(data, v).columns
        assert np.max(np.abs(H.T @ (Y - beta * D))) / len(Y) < 1e-12
        for b in (beta - 0.5, beta + 0.5):
            assert np.max(np.abs(H.T @ (Y - b * D))) / len(Y) > 1e-2
        assert g_interaction(data, v).beta_hat == pytest.approx(beta, abs=1e-10)


# ---------------------------------------------------------------------------
# Interaction GMM


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_instrument_closed_form(seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((300, 2))
    D = Z[:, 0] * Z[:, 1] + Z @ [0.3, 0.2] + rng.standard_normal(300)
    Y = D + rng.standard_normal(300)
    h = (Z[:, 0] - Z[:, 0].mean()) * (Z[:, 1] - Z[:, 1].mean())
    closed = (h @ Y) / (h @ D)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = g_interaction(IVDataset(Y, D, Z), 1).beta_hat
    assert got == pytest.approx(closed, rel=1e-10, abs=1e-12)


def test_chunking_does_not_change_result():
    data, _ = interaction(0, n=3000)
    a = g_interaction(data, 1, chunk_rows=128)
    b = g_interaction(data, 1, chunk_rows=10_000)
    assert a.beta_hat == pytest.approx(b.beta_hat, rel=1e-12)
    assert a.se == pytest.approx(b.se, rel=1e-10)


def test_sandwich_se_matches_monte_carlo_spread():
    est, ses = [], []
    for s in range(150):
        rep = g_interaction(interaction(s, n=4000)[0], 1)
        est.append(rep.beta_hat)
        ses.append(rep.se)
    assert np.median(ses) == pytest.approx(np.std(est), rel=0.2)


def test_no_interaction_structure_warns():
    data, _ = generate(SimScenario(n=5000, p=2, seed=3))
    with pytest.warns(WeakInteractionInstrument):
        g_interaction(data, 1)


def test_correlated_instruments_warn():
    rng = np.random.default_rng(4)
    z1 = rng.standard_normal(3000)
    Z = np.column_stack([z1, 0.6 * z1 + 0.8 * rng.standard_normal(3000)])
    D = Z[:, 0] * Z[:, 1] + rng.standard_normal(3000)
    with pytest.warns(CorrelatedInstruments):
        g_interaction(IVDataset(D + rng.standard_normal(3000), D, Z), 1)


@pytest.mark.slow
def test_interaction_estimator_consistent_with_all_invalid():
    est = [g_interaction(interaction(s)[0], 1).beta_hat for s in range(100)]
    assert abs(np.mean(est) - 1.0) < 0.05
