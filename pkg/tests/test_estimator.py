import math

import numpy as np
import polars as pl
import pytest
from scipy.stats import chi2

from miivbma.constants import INDICATORS
from miivbma.errors import IdentificationError, SarganUndefinedError, SingularMatrixError
from miivbma.estimator import (
    chi_square_upper_tail,
    fit_equation_2sls,
    ols,
    sargan_test,
    two_sls,
    with_intercept,
)
from miivbma.models import EstimationEquation, EstimationSettings, Offset, SimulationConfig
from miivbma.simulation import build_population, design_equations, sample_mvn


def iv_data(n=30, seed=0, instruments=3):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, instruments))
    z = v @ np.linspace(1.0, 0.5, instruments) + rng.normal(size=n)
    y = 0.5 + 1.5 * z + rng.normal(size=n)
    return y, z[:, None], v


def normal_equations(y, x):
    return np.linalg.solve(x.T @ x, x.T @ y)


def test_ols_noiseless():
    x = with_intercept(np.arange(10.0))
    fit = ols(x @ np.array([1.0, 2.0]), x)
    np.testing.assert_allclose(fit.coefficients, [1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(fit.residuals, 0, atol=1e-12)
    assert fit.r_squared == pytest.approx(1.0)


def test_ols_orthogonal_outcome():
    x = with_intercept([-2.0, -1.0, 0.0, 1.0, 2.0])
    fit = ols([2.0, -1.0, -2.0, -1.0, 2.0], x)
    assert fit.coefficients[1] == pytest.approx(0.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(0.0, abs=1e-12)


def test_ols_matches_normal_equations():
    x = with_intercept([1.0, 2.0, 4.0, 7.0, 11.0])
    y = np.array([2.1, 3.9, 8.2, 13.8, 22.5])
    np.testing.assert_allclose(ols(y, x).coefficients, normal_equations(y, x), atol=1e-12)


def test_ols_gram_inverse():
    y, z, v = iv_data()
    x = with_intercept(np.column_stack([z, v]))
    np.testing.assert_allclose(ols(y, x).gram_inverse, np.linalg.inv(x.T @ x), atol=1e-12)


def test_ols_names_collinear_columns():
    a = np.arange(8.0)
    x = with_intercept(np.column_stack([a, 2 * a]))
    with pytest.raises(SingularMatrixError) as info:
        ols(np.ones(8) + a, x, ["(intercept)", "a", "b"])
    assert len(info.value.columns) == 1
    assert info.value.columns[0] in {"a", "b"}


def test_self_instrumenting_matches_ols():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(40, 2))
    y = z @ [0.3, -0.7] + rng.normal(size=40)
    estimate = two_sls(y, z, z)
    reference = ols(y, with_intercept(z))
    assert np.array_equal(estimate.theta, reference.coefficients)
    assert np.array_equal(estimate.residuals, reference.residuals)


def test_two_sls_matches_matrix_formula():
    y, z, v = iv_data()
    estimate = two_sls(y, z, v)
    xz, xv = with_intercept(z), with_intercept(v)
    z_hat = xv @ np.linalg.solve(xv.T @ xv, xv.T @ xz)
    theta = np.linalg.solve(z_hat.T @ z_hat, z_hat.T @ y)
    np.testing.assert_allclose(estimate.theta, theta, atol=1e-10)

    residuals = y - xz @ theta
    sigma2 = residuals @ residuals / (len(y) - 2)
    se = np.sqrt(sigma2 * np.diag(np.linalg.inv(z_hat.T @ z_hat)))
    np.testing.assert_allclose(estimate.se, se, atol=1e-10)
    np.testing.assert_allclose(estimate.residuals, residuals, atol=1e-10)


def test_two_sls_first_stage_r2():
    y, z, v = iv_data()
    estimate = two_sls(y, z, v)
    fit = ols(z[:, 0], with_intercept(v))
    assert estimate.r2_first_stage == [pytest.approx(fit.r_squared)]


def test_projection_invariance():
    y, z, v = iv_data(seed=4)
    estimate = two_sls(y, z, v)
    mixing = np.array([[1.0, 0.5, 0.0], [0.0, 2.0, 0.3], [0.1, 0.0, -1.0]])
    permuted = two_sls(y, z, v[:, [2, 0, 1]])
    mixed = two_sls(y, z, v @ mixing)
    np.testing.assert_allclose(permuted.theta, estimate.theta, atol=1e-10)
    np.testing.assert_allclose(mixed.theta, estimate.theta, atol=1e-10)


def test_vcov_denominator():
    y, z, v = iv_data()
    default = two_sls(y, z, v)
    plain = two_sls(y, z, v, settings=EstimationSettings(vcov_denominator="n"))
    np.testing.assert_allclose(plain.se / default.se, math.sqrt((30 - 2) / 30))
    np.testing.assert_array_equal(plain.theta, default.theta)


def test_two_sls_sargan():
    y, z, v = iv_data()
    estimate = two_sls(y, z, v)
    assert estimate.sargan_df == 2
    aux = ols(estimate.residuals, with_intercept(v))
    assert estimate.sargan_stat == pytest.approx(30 * aux.r_squared)
    assert estimate.sargan_p == pytest.approx(chi2.sf(estimate.sargan_stat, 2))


def test_just_identified_has_no_sargan():
    y, z, v = iv_data(instruments=1)
    estimate = two_sls(y, z, v)
    assert estimate.sargan_p is None
    assert estimate.sargan_df is None


def test_underidentified():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(30, 2))
    with pytest.raises(IdentificationError):
        two_sls(rng.normal(size=30), z, z[:, :1], outcome="y9")


def test_singular_first_stage():
    y, z, v = iv_data()
    v = np.column_stack([v, v[:, 0]])
    with pytest.raises(SingularMatrixError):
        two_sls(y, z, v)


def test_sargan_orthogonal_residuals():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(100, 3))
    residuals = ols(rng.normal(size=100), with_intercept(v)).residuals
    stat, df, p = sargan_test(residuals, v, 1)
    assert stat == pytest.approx(0.0, abs=1e-9)
    assert df == 2
    assert p == pytest.approx(1.0, abs=1e-9)


def test_sargan_just_identified():
    with pytest.raises(SarganUndefinedError):
        sargan_test(np.ones(10), np.ones((10, 1)), 1)


@pytest.mark.parametrize("df", [1, 2, 5, 10])
def test_chi_square_at_zero(df):
    assert chi_square_upper_tail(0.0, df) == 1.0


def test_chi_square_closed_forms():
    assert chi_square_upper_tail(5.0, 2) == pytest.approx(math.exp(-2.5), rel=1e-12)
    assert chi_square_upper_tail(3.84146, 1) == pytest.approx(0.05, abs=1e-4)
    for x in [0.1, 1.0, 3.84146, 10.0, 30.0]:
        expected = math.erfc(math.sqrt(x / 2))
        assert abs(chi_square_upper_tail(x, 1) - expected) < 1e-12


def test_chi_square_rejects_negative():
    with pytest.raises(ValueError):
        chi_square_upper_tail(-1.0, 1)


def test_offsets_move_to_outcome():
    rng = np.random.default_rng(6)
    frame = pl.DataFrame(rng.normal(size=(60, 4)), schema=["a", "b", "c", "d"], orient="row")
    equation = EstimationEquation(
        equation_id=0,
        kind="measurement",
        outcome="a",
        regressors=["b"],
        coefficients=["f=~a"],
        offsets=[Offset(variable="d", value=0.5)],
        disturbance_terms=[],
        miivs=["c", "d"],
    )
    estimate = fit_equation_2sls(equation, frame)
    y = (frame["a"] - 0.5 * frame["d"]).to_numpy()
    reference = two_sls(y, frame.select("b").to_numpy(), frame.select(["c", "d"]).to_numpy())
    np.testing.assert_allclose(estimate.theta, reference.theta, atol=1e-14)
    assert estimate.names == ["(intercept)", "f=~a"]


def replications(config, stream):
    sigma = build_population(config).sigma
    for rep in range(config.reps):
        sample = sample_mvn(sigma, config.n, [stream, rep])
        yield pl.DataFrame(sample, schema=INDICATORS, orient="row")


@pytest.mark.slow
def test_sargan_size_under_true_model():
    config = SimulationConfig(design="sim1", ec=0.6, fc=0.8, n=500, reps=500)
    equation = design_equations(config.design).correct
    rejections = 0
    for data in replications(config, 7):
        rejections += fit_equation_2sls(equation, data).sargan_p < 0.05
    assert 0.025 <= rejections / config.reps <= 0.085


@pytest.mark.slow
def test_consistency_at_large_n():
    config = SimulationConfig(design="sim1", ec=0.6, fc=0.8, n=10_000, reps=100)
    equation = design_equations(config.design).correct
    close = 0
    for data in replications(config, 8):
        close += abs(fit_equation_2sls(equation, data).theta[1] - 1.0) < 0.1
    assert close / config.reps >= 0.95
