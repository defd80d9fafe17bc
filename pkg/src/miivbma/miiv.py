"""
Model-implied instruments.
1. Transform: every latent is replaced by its scaling indicator minus that indicator's error,
   giving one regression per non-scaling indicator and per structural equation.
2. Search: an observed variable instruments an equation when its model-implied covariance with the
   composite disturbance vanishes at every generic parameter draw.
"""

import json
from pathlib import Path

import numpy as np
import rich
import typer
from rich.markup import escape
from rich.table import Table

from miivbma.errors import IdentificationError, exit_on_error
from miivbma.implied import ModelMatrices, model_matrices
from miivbma.models import (
    DisturbanceTerm,
    Edge,
    EstimationEquation,
    MiivSearchSettings,
    ModelIR,
    Offset,
)
from miivbma.parser import free_parameters, parse_model_file

app = typer.Typer(pretty_exceptions_show_locals=False)


def transform_to_observed(model: ModelIR) -> list[EstimationEquation]:
    structural = set(model.structural_observed)
    scaling_indicators = set(model.scaling.values())

    def error_term(indicator: str, sign: int = 1, edge: Edge | None = None):
        if indicator in structural:
            return []
        if edge is None:
            return [DisturbanceTerm(kind="error", variable=indicator, sign=sign)]
        if edge.free:
            return [
                DisturbanceTerm(kind="error", variable=indicator, sign=sign, coefficient=edge.ref)
            ]
        return [DisturbanceTerm(kind="error", variable=indicator, sign=sign, value=edge.value)]

    def right_hand_side(edges: list[Edge], predictor: str):
        regressors, coefficients, offsets, terms = [], [], [], []
        for edge in edges:
            scale = model.scaling_of(getattr(edge, predictor))
            if edge.free:
                regressors.append(scale)
                coefficients.append(edge.ref)
            else:
                offsets.append(Offset(variable=scale, value=edge.value))
            terms += error_term(scale, -1, edge)
        return regressors, coefficients, offsets, terms

    equations = []
    for indicator in model.indicators:
        if indicator in scaling_indicators:
            continue
        edges = [edge for edge in model.loadings_on(indicator) if edge.value != 0]
        regressors, coefficients, offsets, terms = right_hand_side(edges, "lhs")
        if not regressors:
            continue
        equations.append(
            EstimationEquation(
                equation_id=len(equations),
                kind="measurement",
                outcome=indicator,
                regressors=regressors,
                coefficients=coefficients,
                offsets=offsets,
                disturbance_terms=error_term(indicator) + terms,
            )
        )

    for factor in model.endogenous:
        edges = [edge for edge in model.regressions if edge.lhs == factor and edge.value != 0]
        regressors, coefficients, offsets, terms = right_hand_side(edges, "rhs")
        if not regressors:
            continue
        outcome = model.scaling_of(factor)
        zeta = DisturbanceTerm(kind="disturbance", variable=factor)
        equations.append(
            EstimationEquation(
                equation_id=len(equations),
                kind="structural",
                outcome=outcome,
                regressors=regressors,
                coefficients=coefficients,
                offsets=offsets,
                disturbance_terms=error_term(outcome) + terms + [zeta],
            )
        )
    return equations


def generic_values(
    model: ModelIR, rng: np.random.Generator, settings: MiivSearchSettings
) -> dict[str, float]:
    edges = {edge.ref: edge for edge in model.loadings + model.regressions + model.covariances}
    values = {}
    # sorted refs keep the draws independent of declaration order
    for ref in sorted(free_parameters(model)):
        edge = edges[ref]
        variance = edge.op == "~~" and edge.lhs == edge.rhs
        low, high = settings.variance_range if variance else settings.coefficient_range
        values[ref] = float(rng.uniform(low, high))
    return values


def disturbance_covariance(
    matrices: ModelMatrices, equation: EstimationEquation, values: dict[str, float]
) -> np.ndarray:
    """Cov(observed, u_j) with u_j expanded against the structural disturbances and errors."""
    observed = {name: i for i, name in enumerate(matrices.observed)}
    factors = {name: i for i, name in enumerate(matrices.factors)}
    against_zeta = matrices.disturbance_loadings()
    cov = np.zeros(len(matrices.observed))
    for term in equation.disturbance_terms:
        if term.kind == "error":
            cov += term.weight(values) * matrices.theta[:, observed[term.variable]]
        else:
            cov += term.weight(values) * against_zeta[:, factors[term.variable]]
    return cov


def derive_miivs(
    model: ModelIR,
    equation: EstimationEquation,
    settings: MiivSearchSettings | None = None,
) -> list[str]:
    settings = settings or MiivSearchSettings()
    rng = np.random.default_rng(settings.seed)
    observed = model.observed
    excluded = {equation.outcome, *equation.regressors}
    candidates = [name for name in observed if name not in excluded]
    c_index = [observed.index(name) for name in candidates]
    z_index = [observed.index(name) for name in equation.regressors]

    orthogonal = np.ones(len(candidates), dtype=bool)
    relevant = np.zeros(len(candidates), dtype=bool)
    draws = []
    for _ in range(settings.draws):
        values = generic_values(model, rng, settings)
        matrices = model_matrices(model, values)
        sigma = matrices.implied()
        cov_u = disturbance_covariance(matrices, equation, values)[c_index]
        cov_vz = sigma[np.ix_(c_index, z_index)]
        orthogonal &= np.abs(cov_u) < settings.tolerance
        relevant |= (np.abs(cov_vz) > settings.tolerance).any(axis=1)
        draws.append(sigma)

    miivs = [name for name, ok in zip(candidates, orthogonal & relevant) if ok]
    r = len(equation.regressors)
    if len(miivs) < r:
        raise IdentificationError(
            equation.outcome, f"underidentified, {len(miivs)} instruments for {r} regressors"
        )

    v_index = [observed.index(name) for name in miivs]
    sigma = draws[0]
    if np.linalg.matrix_rank(sigma[np.ix_(v_index, z_index)]) < r:
        raise IdentificationError(equation.outcome, "rank of Cov(V, Z) is below the regressors")
    if np.linalg.matrix_rank(sigma[np.ix_(v_index, v_index)]) < len(miivs):
        raise IdentificationError(equation.outcome, "instrument covariance matrix is singular")
    return miivs


def model_equations(
    model: ModelIR, settings: MiivSearchSettings | None = None
) -> list[EstimationEquation]:
    return [
        equation.model_copy(update={"miivs": derive_miivs(model, equation, settings)})
        for equation in transform_to_observed(model)
    ]


def find_equation(equations: list[EstimationEquation], outcome: str) -> EstimationEquation:
    for equation in equations:
        if equation.outcome == outcome:
            return equation
    raise KeyError(f"no equation with outcome {outcome}")


def print_equations(equations: list[EstimationEquation]):
    table = Table(title="Model-implied instruments")
    table.add_column("Equation", style="cyan")
    table.add_column("Disturbance", style="dim")
    table.add_column("MIIVs", style="green")
    table.add_column("Status", style="magenta")
    for equation in equations:
        lhs = f"{equation.outcome} ~ {' + '.join(equation.regressors)}"
        if equation.overidentified:
            status = f"df = {len(equation.miivs) - len(equation.regressors)}"
        else:
            status = "just-identified (Sargan unavailable)"
        table.add_row(lhs, escape(equation.disturbance), ", ".join(equation.miivs), status)
    rich.print(table)


@app.command("explain-miivs")
def explain_miivs(
    model_path: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True),
    json_output: bool = typer.Option(False, "--json", help="Print the equations as JSON"),
    draws: int = typer.Option(MiivSearchSettings().draws, help="Generic parameter draws"),
):
    """
    List each transformed equation, its composite disturbance and its model-implied instruments.
    """
    with exit_on_error():
        model = parse_model_file(model_path)
        equations = model_equations(model, MiivSearchSettings(draws=draws))
    if json_output:
        print(json.dumps([equation.model_dump() for equation in equations], indent=2))
    else:
        print_equations(equations)


if __name__ == "__main__":
    app()
