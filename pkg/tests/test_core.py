import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invalidiv.core import (
    EstimateReport,
    IntervalUnion,
    IVDataset,
    center_and_validate,
    first_stage_f,
    fit_reduced_form,
    load_summary_stats,
    normal_quantile,
    prepare,
    read_individual_csv,
    read_summary_csv,
    residualize_covariates,
    wald_ci,
    write_individual_csv,
    write_summary_csv,
)
from invalidiv.errors import (
    DimensionMismatch,
    EmptyInput,
    MissingSampleSize,
    NonPositiveSE,
    ParseError,
    RankDeficient,
)
from invalidiv.linear import median_estimator
from invalidiv.simulation import SimScenario, generate


def random_dataset(seed, n=200, p=3):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    D = Z @ rng.uniform(0.3, 0.6, p) + rng.standard_normal(n)
    Y = 0.7 * D + rng.standard_normal(n)
    return IVDataset(Y, D, Z)


# ---------------------------------------------------------------------------
# Datasets and centering


def test_centering_hand_example():
    Z = np.array([[1, 2], [3, 4], [5, 0], [2, 2], [4, 2]], dtype=float)
    y = np.array([1, 2, 3, 4, 5], dtype=float)
    d = np.array([2, 2, 2, 2, 7], dtype=float)
    out = center_and_validate(IVDataset(y, d, Z))
    # column means (3, 2), outcome mean 3, exposure mean 3
    np.testing.assert_array_equal(out.instruments, [[-2, 0], [0, 2], [2, -2], [-1, 0], [1, 0]])
    np.testing.assert_array_equal(out.outcome, [-2, -1, 0, 1, 2])
    np.testing.assert_array_equal(out.exposure, [-1, -1, -1, -1, 4])
    assert out.centered


def test_constant_instrument_is_rank_deficient():
    rng = np.random.default_rng(0)
    Z = np.column_stack([rng.standard_normal(20), np.full(20, 3.0)])
    with pytest.raises(RankDeficient):
        center_and_validate(IVDataset(rng.standard_normal(20), rng.standard_normal(20), Z))


def test_centering_is_idempotent():
    once = center_and_validate(random_dataset(1))
    twice = center_and_validate(once)
    np.testing.assert_allclose(twice.instruments, once.instruments, atol=1e-12)
    np.testing.assert_allclose(twice.outcome, once.outcome, atol=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(outcome=np.zeros(5), exposure=np.zeros(4), instruments=np.zeros((5, 1))),
        dict(outcome=np.zeros(3), exposure=np.zeros(3), instruments=np.zeros((3, 2))),
        dict(outcome=np.zeros(5), exposure=np.zeros(5), instruments=np.zeros((5, 0))),
    ],
)
def test_dimension_checks(kwargs):
    with pytest.raises(DimensionMismatch):
        IVDataset(**kwargs)


def test_arrays_are_read_only():
    data = random_dataset(2)
    with pytest.raises(ValueError):
        data.outcome[0] = 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_centered_means_are_zero(seed, p):
    rng = np.random.default_rng(seed)
    n = 50
    data = IVDataset(rng.normal(5, 2, n), rng.normal(-3, 1, n), rng.normal(10, 3, (n, p)))
    out = center_and_validate(data)
    assert np.all(np.abs(out.instruments.mean(axis=0)) < 1e-10)
    assert abs(out.outcome.mean()) < 1e-10 and abs(out.exposure.mean()) < 1e-10


# ---------------------------------------------------------------------------
# Covariates


def test_residualize_hand_example():
    x = np.arange(1, 7, dtype=float)
    y = np.array([2, 1, 4, 3, 6, 5], dtype=float)
    z = np.array([1, 0, 1, 0, 1, 0], dtype=float)
    out = residualize_covariates(IVDataset(y, z + x, z, covariates=x))
    # centered slope of y on x is 14.5 / 17.5 = 29/35
    expected = np.array([4 / 7, -44 / 35, 32 / 35, -32 / 35, 44 / 35, -4 / 7])
    np.testing.assert_allclose(out.outcome, expected, atol=1e-12)
    assert out.covariates is None and out.centered


def test_orthogonal_covariates_leave_data_unchanged():
    data = center_and_validate(random_dataset(3, n=64))
    M = np.column_stack([data.outcome, data.exposure, data.instruments])
    x = np.tile([1.0, -1.0], 32)
    x = x - M @ np.linalg.lstsq(M, x, rcond=None)[0]  # orthogonal to every column
    out = residualize_covariates(data.replace(covariates=x))
    np.testing.assert_allclose(out.instruments, data.instruments, atol=1e-10)
    np.testing.assert_allclose(out.outcome, data.outcome, atol=1e-10)


def test_covariate_equal_to_instrument_zeroes_it():
    data = random_dataset(4)
    out = residualize_covariates(data.replace(covariates=data.instruments[:, 1]))
    assert np.max(np.abs(out.instruments[:, 1])) < 1e-10
    with pytest.raises(RankDeficient):
        prepare(data.replace(covariates=data.instruments[:, 1]))


# ---------------------------------------------------------------------------
# Reduced form


def test_reduced_form_hand_example():
    Z = np.array([1.0, -1.0, 2.0, -2.0])
    D = np.array([2.0, -1.0, 3.0, -4.0])
    Y = np.array([3.0, -1.0, 5.0, -7.0])
    fit = fit_reduced_form(IVDataset(Y, D, Z))
    # gamma = 17/10, Gamma = 28/10
    assert fit.gamma_hat[0] == pytest.approx(1.7, abs=1e-12)
    assert fit.Gamma_hat[0] == pytest.approx(2.8, abs=1e-12)
    assert fit.ratios()[0] == pytest.approx(28 / 17, abs=1e-12)


def test_exact_interpolation_and_zero_outcome():
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((40, 3))
    c = np.array([0.5, -1.0, 2.0])
    D = Z @ [1.0, 0.4, 0.3] + rng.standard_normal(40)
    fit = fit_reduced_form(prepare(IVDataset(Z @ c, D, Z)))
    np.testing.assert_allclose(fit.Gamma_hat, c, atol=1e-9)
    zero = fit_reduced_form(prepare(IVDataset(np.zeros(40), D, Z)))
    assert np.all(zero.Gamma_hat == 0)
    assert np.all(zero.omega_Gamma == 0)


@pytest.mark.parametrize("cov_mode", ["robust", "homoskedastic"])
def test_noiseless_recovery(cov_mode):
    sc = SimScenario(n=300, p=4, beta=1.3, pi_spec={"invalid": [1], "magnitude": 0.7}, noiseless=True, seed=1)
    data, truth = generate(sc)
    fit = fit_reduced_form(prepare(data), cov_mode)
    np.testing.assert_allclose(fit.Gamma_hat, truth.beta * truth.gamma + truth.pi, atol=1e-9)
    np.testing.assert_allclose(fit.gamma_hat, truth.gamma, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["robust", "homoskedastic"]))
def test_omega_symmetric_psd(seed, cov_mode):
    fit = fit_reduced_form(prepare(random_dataset(seed, n=60, p=3)), cov_mode)
    assert np.allclose(fit.omega, fit.omega.T, atol=1e-12)
    assert np.linalg.eigvalsh(fit.omega).min() > -1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_idempotent(seed):
    data = prepare(random_dataset(seed, n=40, p=4))
    P = data.instruments @ data.moments.ZtZ_inv @ data.instruments.T
    assert np.max(np.abs(P @ P - P)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10) | st.floats(-10, -0.1), st.integers(0, 2))
def test_column_scaling_equivariance(seed, c, j):
    data = prepare(random_dataset(seed, n=80, p=3))
    Z2 = data.instruments.copy()
    Z2[:, j] *= c
    f1 = fit_reduced_form(data)
    f2 = fit_reduced_form(prepare(data.replace(instruments=Z2)))
    np.testing.assert_allclose(f2.gamma_hat[j], f1.gamma_hat[j] / c, rtol=1e-9)
    np.testing.assert_allclose(f2.Gamma_hat[j], f1.Gamma_hat[j] / c, rtol=1e-9)
    others = [k for k in range(3) if k != j]
    np.testing.assert_allclose(f2.gamma_hat[others], f1.gamma_hat[others], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(f2.ratios(), f1.ratios(), rtol=1e-9)


def test_column_scaling_on_orthogonal_design():
    Z = np.linalg.qr(np.random.default_rng(0).standard_normal((30, 3)))[0]
    Z = Z - Z.mean(axis=0)
    Z = np.linalg.qr(Z)[0]
    data = prepare(IVDataset(np.arange(30.0) % 7, np.arange(30.0) % 5, Z))
    Z2 = data.instruments.copy()
    Z2[:, 0] *= 4.0
    f1, f2 = fit_reduced_form(data), fit_reduced_form(prepare(data.replace(instruments=Z2)))
    np.testing.assert_allclose(f2.gamma_hat, f1.gamma_hat * [0.25, 1, 1], rtol=1e-10, atol=1e-14)


def test_first_stage_f_matches_regression():
    data = prepare(random_dataset(6, n=500, p=3))
    F, pval = first_stage_f(data)
    Z, D = data.instruments, data.exposure
    resid = D - Z @ np.linalg.lstsq(Z, D, rcond=None)[0]
    rss, tss = resid @ resid, D @ D
    assert F == pytest.approx(((tss - rss) / 3) / (rss / (500 - 3 - 1)), rel=1e-10)
    assert 0 <= pval < 1e-6


# ---------------------------------------------------------------------------
# Summary statistics


def test_summary_packing():
    fit = load_summary_stats([(1.0, 0.1, 2.0, 0.2)])
    assert fit.p == 1 and fit.source == "summary" and fit.n is None
    np.testing.assert_allclose(fit.omega, np.diag([0.04, 0.01]), atol=1e-15)
    with pytest.raises(MissingSampleSize):
        fit.require_n()


def test_summary_cross_block_is_zero():
    fit = load_summary_stats([(1.0, 0.1, 2.0, 0.2), (0.5, 0.05, 0.4, 0.1)], n=1000)
    assert np.all(fit.omega_cross == 0)


@pytest.mark.parametrize("rec", [(1.0, 0.0, 2.0, 0.2), (1.0, 0.1, 2.0, -0.2), (1.0, 0.1, 2.0, float("nan"))])
def test_summary_rejects_bad_se(rec):
    with pytest.raises(NonPositiveSE):
        load_summary_stats([rec])


def test_summary_empty():
    with pytest.raises(EmptyInput):
        load_summary_stats([])


def test_summary_round_trip_median(tmp_path):
    data, _ = generate(SimScenario(n=2000, p=5, pi_spec={"invalid": [0], "magnitude": 0.4}, seed=9))
    fit = fit_reduced_form(prepare(data))
    path = tmp_path / "summary.csv"
    write_summary_csv(fit, path)
    back = read_summary_csv(path, n=2000)
    assert median_estimator(back).beta_hat == median_estimator(fit).beta_hat


# ---------------------------------------------------------------------------
# CSV input


def test_individual_csv_round_trip(tmp_path):
    data = random_dataset(7, n=30, p=2)
    path = tmp_path / "d.csv"
    write_individual_csv(data, path)
    back = read_individual_csv(path)
    np.testing.assert_array_equal(back.instruments, data.instruments)
    assert back.names == ("z1", "z2")


def test_csv_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,d,z1\n1,2,3\n4,oops,6\n")
    with pytest.raises(ParseError) as info:
        read_individual_csv(path)
    assert info.value.line == 3


def test_csv_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,z1\n1,2\n")
    with pytest.raises(ParseError) as info:
        read_individual_csv(path)
    assert info.value.line == 1


def test_summary_csv_nonpositive_se(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("gamma_hat,se_gamma,Gamma_hat,se_Gamma\n1,0.1,2,0.2\n1,0,2,0.2\n")
    with pytest.raises(NonPositiveSE):
        read_summary_csv(path)


# ---------------------------------------------------------------------------
# Interval unions and reports


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(0, 10)), max_size=12))
def test_merge_produces_sorted_disjoint_union(raw):
    pieces = [(a, a + w) for a, w in raw]
    u = IntervalUnion.merge(pieces)
    for lo, hi in u.intervals:
        assert lo <= hi
    for (_, h0), (l1, _) in zip(u.intervals, u.intervals[1:]):
        assert h0 < l1
    for lo, hi in pieces:
        assert u.contains(lo) and u.contains(hi) and u.contains(0.5 * (lo + hi))
    # every union point lies in some piece
    for lo, hi in u.intervals:
        assert any(a <= lo <= b for a, b in pieces) and any(a <= hi <= b for a, b in pieces)


def test_interval_union_rejects_overlap():
    with pytest.raises(ValueError):
        IntervalUnion(((0, 2), (1, 3)))
    with pytest.raises(ValueError):
        IntervalUnion(((2, 1),))


def test_interval_union_basics():
    u = IntervalUnion.merge([(0, 1), (3, 4), (0.5, 2)])
    assert u.to_list() == [[0, 2], [3, 4]]
    assert u.length == 3 and u.hull().to_list() == [[0, 4]]
    assert IntervalUnion.single(0.5, 1).issubset(u)
    assert IntervalUnion().is_empty


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100), st.floats(1e-3, 10), st.sampled_from([0.01, 0.05, 0.1]))
def test_wald_ci_matches_se(beta, se, alpha):
    ci = wald_ci(beta, se, alpha)
    z = normal_quantile(1 - alpha / 2)
    assert abs(ci.lower - (beta - z * se)) <= 1e-9 * max(1, abs(beta))
    assert abs(ci.upper - (beta + z * se)) <= 1e-9 * max(1, abs(beta))


def test_report_serialization_is_stable():
    rep = EstimateReport(
        "x",
        1.5,
        0.1,
        IntervalUnion(((float("-inf"), 0.0), (1.0, 2.0)), frozenset({"b", "a"})),
        (0, 2),
        {"z": np.float64(1.0), "a": [np.int64(1)], "nan": float("nan")},
    )
    d = rep.to_dict(names=("u", "v", "w"))
    assert set(d) == {"method", "beta_hat", "se", "ci", "ci_flags", "valid_set", "diagnostics", "valid_names"}
    assert d["ci"] == [["-inf", 0.0], [1.0, 2.0]] and d["ci_flags"] == ["a", "b"]
    assert d["valid_names"] == ["u", "w"] and d["diagnostics"]["nan"] is None
    text = json.dumps(d, sort_keys=True, allow_nan=False)
    assert json.loads(text) == d
