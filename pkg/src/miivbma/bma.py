"""
Two-stage Bayesian model averaging over instrument subsets.
1. Enumerate every instrument subset with at least one more instrument than regressors.
2. Fit 2SLS on each subset and score its first stage with an empirical-Bayes g-prior Bayes factor.
3. Weight the subset estimates, variances and Sargan p-values by the posterior model
   probabilities, then condition on each instrument for the instrument-specific diagnostics.
"""

import math
from collections.abc import Sequence
from itertools import combinations
from typing import NamedTuple

import numpy as np
import polars as pl
from rich.console import Console
from scipy.special import softmax

from miivbma.constants import INTERCEPT, LOG_BF_CAP, SUBSET_CAP
from miivbma.errors import NumericalError, SingularMatrixError, SubsetCapError
from miivbma.estimator import as_matrix, equation_arrays, two_sls
from miivbma.models import (
    BmaEquationResult,
    BmaSettings,
    EstimationEquation,
    EstimationSettings,
    InstrumentDiagnostic,
    SubsetFit,
)

console = Console(stderr=True)


class SuspectRanking(NamedTuple):
    order: list[str]
    tied: bool


# Subsets
def count_subsets(v: int, z: int) -> int:
    return sum(math.comb(v, size) for size in range(z + 1, v + 1))


def unrank_combination(names: Sequence[str], size: int, rank: int) -> tuple[str, ...]:
    chosen = []
    start = 0
    for remaining in range(size, 0, -1):
        for i in range(start, len(names)):
            block = math.comb(len(names) - i - 1, remaining - 1)
            if rank < block:
                chosen.append(names[i])
                start = i + 1
                break
            rank -= block
    return tuple(chosen)


def unrank_subset(names: Sequence[str], z: int, index: int) -> tuple[str, ...]:
    for size in range(z + 1, len(names) + 1):
        block = math.comb(len(names), size)
        if index < block:
            return unrank_combination(names, size, index)
        index -= block
    raise IndexError(f"subset index {index} out of range")


def enumerate_subsets(
    miivs: Sequence[str],
    z: int,
    cap: int = SUBSET_CAP,
    sample: int | None = None,
    seed: int = 0,
) -> list[tuple[str, ...]]:
    """
    Instrument subsets of size z+1 through v, ordered by size and then by name.

    With `sample`, a seeded uniform draw of that many distinct subsets is returned in the same
    order instead of the full enumeration.
    """
    names = sorted(miivs)
    if len(names) < z + 1:
        raise ValueError(f"{len(names)} instruments cannot overidentify {z} regressors")
    total = count_subsets(len(names), z)
    if sample is not None and sample < total:
        rng = np.random.default_rng(seed)
        indices = sorted(int(i) for i in rng.choice(total, size=sample, replace=False))
        return [unrank_subset(names, z, i) for i in indices]
    if total > cap:
        raise SubsetCapError(
            f"{total} instrument subsets exceed the cap of {cap}, "
            "raise --subset-cap or evaluate a sample with --subset-sample"
        )
    return [
        subset for size in range(z + 1, len(names) + 1) for subset in combinations(names, size)
    ]


# Bayes factors
def empirical_bayes_g(r2: float, p: int, n: int) -> float:
    if n <= p + 1:
        raise ValueError(f"n = {n} leaves no residual degrees of freedom for {p} predictors")
    if r2 >= 1:
        return math.inf
    f_stat = (r2 / p) / ((1 - r2) / (n - 1 - p))
    return max(f_stat - 1, 0.0)


def log_bayes_factor(g: float, r2: float, p: int, n: int) -> float:
    """Log Bayes factor of a first-stage regression against the intercept-only model."""
    if math.isinf(g):
        return LOG_BF_CAP
    value = (n - p - 1) / 2 * math.log1p(g) - (n - 1) / 2 * math.log1p(g * (1 - r2))
    return min(value, LOG_BF_CAP)


def model_probabilities(log_bfs: Sequence[float]) -> np.ndarray:
    log_bfs = np.asarray(log_bfs, dtype=float)
    if log_bfs.size == 0:
        raise ValueError("no models to weigh")
    if np.all(np.isneginf(log_bfs)):
        raise NumericalError("no valid first-stage model")
    return softmax(log_bfs)


# Sargan averages
def bma_sargan(pis: Sequence[float], sargan_ps: Sequence[float]) -> float:
    if len(pis) != len(sargan_ps):
        raise ValueError(f"{len(pis)} probabilities for {len(sargan_ps)} p-values")
    return float(np.clip(np.dot(pis, sargan_ps), 0.0, 1.0))


def containing(subset_fits: Sequence[SubsetFit], q: str) -> list[SubsetFit]:
    selected = [fit for fit in subset_fits if q in fit.subset]
    if not selected:
        raise KeyError(f"instrument {q} appears in no subset")
    return selected


def instrument_specific_sargan(subset_fits: Sequence[SubsetFit], q: str) -> float:
    selected = containing(subset_fits, q)
    pis = model_probabilities([fit.log_bf for fit in selected])
    return bma_sargan(pis, [fit.sargan_p for fit in selected])


def inclusion_probability(subset_fits: Sequence[SubsetFit], q: str) -> float:
    selected = containing(subset_fits, q)
    if len(selected) == len(subset_fits):
        return 1.0
    return min(math.fsum(fit.pi for fit in selected), 1.0)


def rank_suspects(is_ps: dict[str, float]) -> SuspectRanking:
    """Instruments by ascending instrument-specific p-value, ties broken by name."""
    if not is_ps:
        raise ValueError("no instruments to rank")
    order = sorted(is_ps, key=lambda q: (is_ps[q], q))
    values = list(is_ps.values())
    return SuspectRanking(order, len(set(values)) < len(values))


# Estimation
def fit_subset(
    y: np.ndarray,
    z: np.ndarray,
    v: np.ndarray,
    subset: tuple[str, ...],
    regressor_names: Sequence[str],
    settings: EstimationSettings,
    outcome: str,
) -> SubsetFit:
    n = len(y)
    k = len(subset)
    estimate = two_sls(y, z, v, regressor_names, subset, settings, outcome)
    g = [empirical_bayes_g(r2, k, n) for r2 in estimate.r2_first_stage]
    # independent first stages, one Bayes factor per endogenous regressor
    log_bf = sum(
        log_bayes_factor(gi, r2, k, n) for gi, r2 in zip(g, estimate.r2_first_stage)
    )
    return SubsetFit(
        subset=list(subset),
        r2=estimate.r2_first_stage,
        g=g,
        log_bf=min(log_bf, LOG_BF_CAP),
        pi=0.0,
        theta=estimate.theta.tolist(),
        var_theta=(estimate.se**2).tolist(),
        sargan_stat=estimate.sargan_stat,
        sargan_p=estimate.sargan_p,
    )


def average_subsets(
    y,
    z,
    v,
    regressor_names: Sequence[str],
    instrument_names: Sequence[str],
    outcome: str = "y",
    settings: BmaSettings | None = None,
    estimation_settings: EstimationSettings | None = None,
) -> BmaEquationResult:
    settings = settings or BmaSettings()
    estimation_settings = estimation_settings or EstimationSettings()
    y = np.asarray(y, dtype=float)
    z = as_matrix(z)
    v = as_matrix(v)
    column = {name: i for i, name in enumerate(instrument_names)}
    subsets = enumerate_subsets(
        instrument_names, z.shape[1], settings.subset_cap, settings.subset_sample, settings.seed
    )

    fits, dropped = [], []
    for subset in subsets:
        columns = v[:, [column[name] for name in subset]]
        try:
            fit = fit_subset(y, z, columns, subset, regressor_names, estimation_settings, outcome)
        except SingularMatrixError as exc:
            console.print(f"[yellow]{outcome}: dropped subset {', '.join(subset)}, {exc}[/]")
            dropped.append(list(subset))
            continue
        fits.append(fit)
    if not fits:
        raise NumericalError(f"every instrument subset of {outcome} is singular")

    pis = model_probabilities([fit.log_bf for fit in fits])
    fits = [fit.model_copy(update={"pi": float(pi)}) for fit, pi in zip(fits, pis)]
    thetas = np.array([fit.theta for fit in fits])
    variances = np.array([fit.var_theta for fit in fits])
    theta = pis @ thetas
    var = pis @ variances + pis @ (thetas - theta) ** 2

    instruments = []
    for name in instrument_names:
        if not any(name in fit.subset for fit in fits):
            continue
        inclusion = inclusion_probability(fits, name)
        instruments.append(
            InstrumentDiagnostic(
                name=name,
                inclusion_prob=inclusion,
                is_sargan_p=instrument_specific_sargan(fits, name),
                weak=inclusion < settings.weak_threshold,
            )
        )
    ranking = rank_suspects({item.name: item.is_sargan_p for item in instruments})

    return BmaEquationResult(
        outcome=outcome,
        names=[INTERCEPT, *regressor_names],
        theta=theta.tolist(),
        var=var.tolist(),
        bma_sargan_p=bma_sargan(pis, [fit.sargan_p for fit in fits]),
        instruments=instruments,
        ranked_suspects=ranking.order,
        suspects_tied=ranking.tied,
        subset_fits=fits,
        dropped_subsets=dropped,
        n=len(y),
    )


def fit_equation_2sbma(
    equation: EstimationEquation,
    data: pl.DataFrame,
    settings: BmaSettings | None = None,
    estimation_settings: EstimationSettings | None = None,
) -> BmaEquationResult:
    y, z, v = equation_arrays(equation, data)
    return average_subsets(
        y,
        z,
        v,
        equation.coefficients,
        equation.miivs,
        equation.outcome,
        settings,
        estimation_settings,
    )
