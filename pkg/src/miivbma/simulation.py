"""
Monte Carlo comparison of the estimators on the two-factor population.
1. Population: unit loadings, factor covariance fc·ψ and one omitted error covariance ec, built
   from model syntax with every value fixed and run through the implied covariance.
2. Replications: data are drawn from N(0, Σ) on a counter-based stream per replication, then λ2 is
   estimated by 2SLS with the misspecified model's instruments, 2SLS with the true model's
   instruments and 2SBMA with the misspecified model's instruments.
3. Aggregation: bias, Sargan rejection rates and the per-instrument diagnostics, in replication
   order so serial and parallel runs agree.
"""

import hashlib
import multiprocessing
from collections.abc import Iterator
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from functools import cache, partial
from pathlib import Path
from typing import NamedTuple

import numpy as np
import polars as pl
import rich
import scipy.linalg as la
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.progress import track

from miivbma.bma import fit_equation_2sbma
from miivbma.constants import (
    CFA_MODEL,
    INDICATORS,
    MAX_FAILURE_RATE,
    OMITTED_COVARIANCE,
    TARGET_LOADING,
    TARGET_OUTCOME,
)
from miivbma.errors import (
    ConfigError,
    MiivbmaError,
    PopulationError,
    SimulationError,
    exit_on_error,
)
from miivbma.estimator import fit_equation_2sls
from miivbma.implied import implied_covariance
from miivbma.miiv import find_equation, model_equations
from miivbma.models import (
    BmaSettings,
    ConditionSummary,
    EstimationEquation,
    EstimatorSummary,
    GridConfig,
    ParamAssignment,
    SimulationConfig,
)
from miivbma.parser import parse_model

app = typer.Typer(pretty_exceptions_show_locals=False)
console = Console(stderr=True)

ESTIMATORS = ["invalid_2sls", "correct_2sls", "2sbma"]


class Population(NamedTuple):
    names: list[str]
    sigma: np.ndarray
    true_loading: float


class ConditionRun(NamedTuple):
    summary: ConditionSummary
    replications: pl.DataFrame


class DesignEquations(NamedTuple):
    invalid: EstimationEquation
    correct: EstimationEquation
    invalid_instrument: str


"""
Population
"""


def population_syntax(config: SimulationConfig) -> str:
    psi = config.factor_variance
    lines = [
        "eta1 =~ " + " + ".join(f"1.0*{name}" for name in INDICATORS[:4]),
        "eta2 =~ " + " + ".join(f"1.0*{name}" for name in INDICATORS[4:]),
        f"eta1 ~~ {psi!r}*eta1",
        f"eta2 ~~ {psi!r}*eta2",
        # fc is a correlation, scaled by the factor variances
        f"eta1 ~~ {config.fc * psi!r}*eta2",
    ]
    lines += [f"{name} ~~ {config.error_variance!r}*{name}" for name in INDICATORS]
    if config.ec != 0:
        a, b = OMITTED_COVARIANCE[config.design]
        lines.append(f"{a} ~~ {config.ec!r}*{b}")
    return "\n".join(lines) + "\n"


def build_population(config: SimulationConfig) -> Population:
    model = parse_model(population_syntax(config))
    implied = implied_covariance(model, ParamAssignment(values={}))
    if not implied.positive_definite:
        raise PopulationError(
            f"population covariance for {config.key} is not positive definite "
            f"(smallest eigenvalue {implied.min_eigenvalue:.3g})"
        )
    return Population(implied.names, implied.sigma, TARGET_LOADING)


def sample_mvn(sigma: np.ndarray, n: int, seed) -> np.ndarray:
    """
    Draw n rows from N(0, sigma).

    `seed` is an integer, a sequence of integers used as SeedSequence entropy, or a Generator.
    """
    try:
        factor = la.cholesky(sigma, lower=True)
    except la.LinAlgError as exc:
        raise PopulationError("covariance matrix is not positive definite") from exc
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.standard_normal((n, sigma.shape[0])) @ factor.T


def condition_id(config: SimulationConfig) -> int:
    return int(hashlib.sha256(config.key.encode()).hexdigest()[:16], 16)


def replication_seed(config: SimulationConfig, rep: int) -> list[int]:
    return [config.seed, condition_id(config), rep]


"""
Replications
"""


@cache
def design_equations(design: str) -> DesignEquations:
    a, b = OMITTED_COVARIANCE[design]
    misspecified = parse_model(CFA_MODEL)
    true_model = parse_model(CFA_MODEL + f"{a} ~~ {b}\n")
    return DesignEquations(
        invalid=find_equation(model_equations(misspecified), TARGET_OUTCOME),
        correct=find_equation(model_equations(true_model), TARGET_OUTCOME),
        invalid_instrument=b if a == TARGET_OUTCOME else a,
    )


def run_replication(config: SimulationConfig, sigma: np.ndarray, rep: int) -> dict | None:
    equations = design_equations(config.design)
    sample = sample_mvn(sigma, config.n, replication_seed(config, rep))
    data = pl.DataFrame(sample, schema=INDICATORS, orient="row")
    try:
        invalid = fit_equation_2sls(equations.invalid, data)
        correct = fit_equation_2sls(equations.correct, data)
        bma = fit_equation_2sbma(equations.invalid, data, BmaSettings())
    except MiivbmaError as exc:
        console.print(f"[yellow]{config.key} replication {rep} failed: {exc}[/]")
        return None

    row = {
        "rep": rep,
        "invalid_2sls_theta": float(invalid.theta[1]),
        "invalid_2sls_se": float(invalid.se[1]),
        "invalid_2sls_sargan_p": invalid.sargan_p,
        "correct_2sls_theta": float(correct.theta[1]),
        "correct_2sls_se": float(correct.se[1]),
        "correct_2sls_sargan_p": correct.sargan_p,
        "2sbma_theta": bma.theta[1],
        "2sbma_se": bma.se[1],
        "2sbma_sargan_p": bma.bma_sargan_p,
        "suspect": bma.ranked_suspects[0],
    }
    for item in bma.instruments:
        row[f"is_p_{item.name}"] = item.is_sargan_p
        row[f"incl_{item.name}"] = item.inclusion_prob
    return row


def summarize(
    config: SimulationConfig, replications: pl.DataFrame, failures: int
) -> ConditionSummary:
    equations = design_equations(config.design)
    instruments = sorted(equations.invalid.miivs)
    alpha = config.alpha

    estimators = {}
    for name in ESTIMATORS:
        bias = replications[f"{name}_theta"].to_numpy() - TARGET_LOADING
        estimators[name] = EstimatorSummary(
            median_bias=float(np.median(bias)),
            mean_abs_bias=float(np.mean(np.abs(bias))),
            sargan_power=float(np.mean(replications[f"{name}_sargan_p"].to_numpy() < alpha)),
            mean_se=float(replications[f"{name}_se"].mean()),
        )

    suspects = replications["suspect"].to_list()
    return ConditionSummary(
        config=config,
        invalid_instrument=equations.invalid_instrument,
        instruments=instruments,
        estimators=estimators,
        is_sargan_power={
            q: float(np.mean(replications[f"is_p_{q}"].to_numpy() < alpha)) for q in instruments
        },
        specificity={q: suspects.count(q) / len(suspects) for q in instruments},
        mean_inclusion_prob={q: float(replications[f"incl_{q}"].mean()) for q in instruments},
        completed=replications.height,
        failures=failures,
    )


def simulate_condition(config: SimulationConfig, workers: int = 1) -> ConditionRun:
    population = build_population(config)
    run = partial(run_replication, config, population.sigma)
    description = f"[cyan]{config.key}"
    if workers > 1:
        # forked workers inherit a held polars thread-pool lock
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as executor:
            chunksize = max(1, config.reps // (workers * 4))
            results = executor.map(run, range(config.reps), chunksize=chunksize)
            rows = list(track(results, total=config.reps, description=description))
    else:
        rows = list(track(map(run, range(config.reps)), total=config.reps, description=description))

    completed = [row for row in rows if row is not None]
    failures = len(rows) - len(completed)
    if failures > MAX_FAILURE_RATE * config.reps:
        raise SimulationError(f"{config.key}: {failures} of {config.reps} replications failed")
    if not completed:
        raise SimulationError(f"{config.key}: no replication completed")
    replications = pl.DataFrame(completed)
    return ConditionRun(summarize(config, replications, failures), replications)


def run_condition(config: SimulationConfig, workers: int = 1) -> ConditionSummary:
    return simulate_condition(config, workers).summary


def load_grid(path: Path) -> list[SimulationConfig]:
    try:
        return GridConfig.model_validate_json(Path(path).read_text()).conditions()
    except ValidationError as exc:
        raise ConfigError(f"invalid grid config {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def check_populations(conditions: list[SimulationConfig]):
    for config in conditions:
        build_population(config)


def run_grid(conditions: list[SimulationConfig], workers: int = 1) -> Iterator[ConditionRun]:
    """
    Check every population up front, then run the conditions lazily in grid order.
    """
    check_populations(conditions)
    return (simulate_condition(config, workers) for config in conditions)


def write_condition(run: ConditionRun, out_dir: Path):
    key = run.summary.config.key
    (out_dir / f"{key}.json").write_text(run.summary.model_dump_json(indent=2) + "\n")
    run.replications.write_csv(out_dir / f"{key}_replications.csv")
    with open(out_dir / "simulate.log", "a") as log:
        log.write(
            f"{datetime.now().isoformat(timespec='seconds')} {key} "
            f"completed={run.summary.completed} failures={run.summary.failures}\n"
        )


@app.command("simulate")
def simulate(
    config_path: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True),
    out_dir: Path = typer.Argument(..., file_okay=False),
    workers: int = typer.Option(1, min=1, help="Processes used for replications"),
):
    """
    Run every condition of a simulation grid and write one JSON summary per condition together
    with the raw replications as CSV.
    """
    with exit_on_error():
        conditions = load_grid(config_path)
        runs = run_grid(conditions, workers)
        out_dir.mkdir(parents=True, exist_ok=True)
        for run in runs:
            write_condition(run, out_dir)
            bma = run.summary.estimators["2sbma"]
            rich.print(
                f"[green]{run.summary.config.key}[/] median bias {bma.median_bias:.3f}, "
                f"BMA-S power {bma.sargan_power:.3f}, "
                f"specificity of {run.summary.invalid_instrument} "
                f"{run.summary.specificity[run.summary.invalid_instrument]:.3f}"
            )
    rich.print(f"Wrote {len(conditions)} conditions to {out_dir}")


if __name__ == "__main__":
    app()
