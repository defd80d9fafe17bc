"""
Equation-level estimators. Every regression goes through a pivoted QR decomposition; intercepts
are added here, callers pass raw regressor and instrument columns.
"""

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np
import polars as pl
import scipy.linalg as la
from scipy.special import gammaincc

from miivbma.constants import INTERCEPT, RANK_TOLERANCE
from miivbma.errors import (
    IdentificationError,
    NumericalError,
    SarganUndefinedError,
    SingularMatrixError,
)
from miivbma.models import EquationEstimate, EstimationEquation, EstimationSettings


class LeastSquares(NamedTuple):
    coefficients: np.ndarray
    residuals: np.ndarray
    r_squared: float
    gram_inverse: np.ndarray


class SarganResult(NamedTuple):
    stat: float
    df: int
    p: float


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def with_intercept(x) -> np.ndarray:
    x = as_matrix(x)
    return np.column_stack([np.ones(x.shape[0]), x])


def pivoted_qr(x: np.ndarray, names: Sequence[str] | None = None):
    q, r, piv = la.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tolerance = RANK_TOLERANCE * (diag[0] if diag.size else 0.0)
    rank = int((diag > tolerance).sum())
    if rank < x.shape[1]:
        names = list(names) if names is not None else [f"column {i}" for i in range(x.shape[1])]
        raise SingularMatrixError([names[i] for i in piv[rank:]])
    return q, r, piv


def r_squared(y: np.ndarray, residuals: np.ndarray) -> float:
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0:
        return 0.0
    return float(np.clip(1 - residuals @ residuals / tss, 0.0, 1.0))


def ols(y, x, names: Sequence[str] | None = None) -> LeastSquares:
    """
    Least squares of y on a design that already holds its intercept column.

    Raises:
        SingularMatrixError: naming the columns that are linear combinations of the others
    """
    y = np.asarray(y, dtype=float)
    x = as_matrix(x)
    n, p = x.shape
    if n <= p:
        raise NumericalError(f"{n} observations cannot identify {p} coefficients")
    q, r, piv = pivoted_qr(x, names)
    coefficients = np.empty(p)
    coefficients[piv] = la.solve_triangular(r, q.T @ y)
    residuals = y - x @ coefficients
    r_inv = la.solve_triangular(r, np.eye(p))
    gram_inverse = np.empty((p, p))
    gram_inverse[np.ix_(piv, piv)] = r_inv @ r_inv.T
    return LeastSquares(coefficients, residuals, r_squared(y, residuals), gram_inverse)


def chi_square_upper_tail(x: float, df: int) -> float:
    if x < 0:
        raise ValueError(f"chi-square statistic must be nonnegative, got {x}")
    return float(gammaincc(df / 2, x / 2))


def sargan_test(residuals, instruments, regressors: int) -> SarganResult:
    """nR² of the residuals regressed on the instruments, chi-square with v - r df."""
    residuals = np.asarray(residuals, dtype=float)
    instruments = as_matrix(instruments)
    v = instruments.shape[1]
    if v <= regressors:
        raise SarganUndefinedError(
            f"Sargan test needs more instruments than regressors ({v} <= {regressors})"
        )
    aux = ols(residuals, with_intercept(instruments))
    stat = len(residuals) * aux.r_squared
    df = v - regressors
    return SarganResult(stat, df, chi_square_upper_tail(stat, df))


def two_sls(
    y,
    z,
    v,
    regressor_names: Sequence[str] | None = None,
    instrument_names: Sequence[str] | None = None,
    settings: EstimationSettings | None = None,
    outcome: str = "y",
) -> EquationEstimate:
    settings = settings or EstimationSettings()
    y = np.asarray(y, dtype=float)
    z = as_matrix(z)
    v = as_matrix(v)
    n, r = z.shape
    k = v.shape[1]
    regressor_names = list(regressor_names or [f"z{i + 1}" for i in range(r)])
    instrument_names = list(instrument_names or [f"v{i + 1}" for i in range(k)])
    if k < r:
        raise IdentificationError(outcome, f"underidentified, {k} instruments for {r} regressors")
    if n <= k + 1:
        raise NumericalError(f"{n} observations for {k} instruments")

    xz = with_intercept(z)
    if np.array_equal(z, v):
        # self-instrumenting regressors, the projection is the identity
        z_hat = xz
        first_stage = [1.0] * r
    else:
        q, _, _ = pivoted_qr(with_intercept(v), [INTERCEPT, *instrument_names])
        projected = q @ (q.T @ z)
        z_hat = with_intercept(projected)
        first_stage = [r_squared(z[:, i], z[:, i] - projected[:, i]) for i in range(r)]

    names = [INTERCEPT, *regressor_names]
    second = ols(y, z_hat, names)
    theta = second.coefficients
    residuals = y - xz @ theta
    dof = n - r - 1 if settings.vcov_denominator == "n-k" else n
    sigma2 = float(residuals @ residuals / dof)
    se = np.sqrt(sigma2 * np.diag(second.gram_inverse))

    estimate = EquationEstimate(
        names=names,
        theta=theta,
        se=se,
        residuals=residuals,
        sigma2=sigma2,
        r2_first_stage=first_stage,
        n=n,
    )
    if k > r:
        stat, df, p = sargan_test(residuals, v, r)
        estimate.sargan_stat, estimate.sargan_df, estimate.sargan_p = stat, df, p
    return estimate


def equation_arrays(equation: EstimationEquation, data: pl.DataFrame):
    """Outcome with fixed-coefficient terms moved to the left, regressors and instruments."""
    y = data[equation.outcome].to_numpy().astype(float)
    for offset in equation.offsets:
        y = y - offset.value * data[offset.variable].to_numpy()
    z = data.select(equation.regressors).to_numpy().astype(float)
    v = data.select(equation.miivs).to_numpy().astype(float)
    return y, z, v


def fit_equation_2sls(
    equation: EstimationEquation,
    data: pl.DataFrame,
    settings: EstimationSettings | None = None,
    miivs: Sequence[str] | None = None,
) -> EquationEstimate:
    if miivs is not None:
        equation = equation.model_copy(update={"miivs": list(miivs)})
    y, z, v = equation_arrays(equation, data)
    return two_sls(
        y, z, v, equation.coefficients, equation.miivs, settings, outcome=equation.outcome
    )
