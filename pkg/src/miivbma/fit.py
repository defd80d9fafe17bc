"""
Estimation pipeline.
1. Parse the model and load the listwise-complete data for its observed variables.
2. Transform to observed-variable equations, keep the selected ones and derive their MIIVs.
3. Estimate every selected equation with 2SLS or 2SBMA and assemble the report.
"""

from pathlib import Path

import typer

from miivbma import __version__
from miivbma.bma import fit_equation_2sbma
from miivbma.constants import ALPHA, MIIV_SEED, SUBSET_CAP
from miivbma.data import file_sha256, load_csv
from miivbma.errors import ConfigError, exit_on_error
from miivbma.estimator import fit_equation_2sls
from miivbma.miiv import derive_miivs, transform_to_observed
from miivbma.models import (
    BmaSettings,
    EstimationSettings,
    Estimator,
    FitReport,
    FitSettings,
    MiivSearchSettings,
    Provenance,
)
from miivbma.parser import parse_model_file
from miivbma.report import bma_report, print_report, two_sls_report

app = typer.Typer(pretty_exceptions_show_locals=False)


def fit_model(model_path: Path, data_path: Path, settings: FitSettings | None = None) -> FitReport:
    settings = settings or FitSettings()
    model = parse_model_file(model_path)
    loaded = load_csv(data_path, model.observed)
    equations = transform_to_observed(model)

    if settings.equations:
        outcomes = {equation.outcome for equation in equations}
        unknown = [name for name in settings.equations if name not in outcomes]
        if unknown:
            raise ConfigError(f"no equation with outcome {', '.join(unknown)}")
        equations = [equation for equation in equations if equation.outcome in settings.equations]

    search = MiivSearchSettings()
    equations = [
        equation.model_copy(update={"miivs": derive_miivs(model, equation, search)})
        for equation in equations
    ]

    reports = []
    for equation in equations:
        if settings.estimator == Estimator.two_sbma and equation.overidentified:
            result = fit_equation_2sbma(equation, loaded.frame, settings.bma, settings.estimation)
            reports.append(bma_report(equation, result, settings.alpha, settings.audit_subsets))
            continue
        estimate = fit_equation_2sls(equation, loaded.frame, settings.estimation)
        note = None
        if settings.estimator == Estimator.two_sbma:
            note = "just-identified, no subsets to average; 2SLS estimate shown, Sargan unavailable"
        reports.append(two_sls_report(equation, estimate, settings.alpha, note))

    return FitReport(
        equations=reports,
        provenance=Provenance(
            version=__version__,
            model_path=str(model_path),
            model_sha256=file_sha256(Path(model_path)),
            data_path=str(data_path),
            data_sha256=file_sha256(Path(data_path)),
            rows_used=loaded.frame.height,
            rows_dropped=loaded.rows_dropped,
            miiv_seed=MIIV_SEED,
            settings=settings,
        ),
    )


@app.command("fit")
def fit(
    model_path: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True),
    data_path: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True),
    estimator: Estimator = typer.Option(Estimator.two_sls, "--estimator", "-e"),
    alpha: float = typer.Option(ALPHA, min=0, max=1, help="Significance level for Sargan tests"),
    subset_cap: int = typer.Option(SUBSET_CAP, min=1, help="Maximum number of subsets"),
    subset_sample: int = typer.Option(
        None, min=1, help="Evaluate a seeded uniform sample of this many subsets"
    ),
    seed: int = typer.Option(0, help="Seed for subset sampling"),
    vcov_denominator: str = typer.Option("n-k", help="Residual variance divisor: n-k or n"),
    audit_subsets: bool = typer.Option(False, help="Include every subset fit in the JSON"),
    equation: list[str] = typer.Option(None, "--equation", help="Only fit these outcomes"),
    out: Path = typer.Option(None, "--out", "-o", help="Write the report as JSON"),
):
    """
    Estimate every equation of a model with MIIV-2SLS or MIIV-2SBMA.
    """
    with exit_on_error():
        if vcov_denominator not in ("n-k", "n"):
            raise ConfigError(f"--vcov-denominator must be n-k or n, got {vcov_denominator}")
        settings = FitSettings(
            estimator=estimator,
            alpha=alpha,
            bma=BmaSettings(subset_cap=subset_cap, subset_sample=subset_sample, seed=seed),
            estimation=EstimationSettings(vcov_denominator=vcov_denominator),
            audit_subsets=audit_subsets,
            equations=equation or None,
        )
        report = fit_model(model_path, data_path, settings)
    print_report(report)
    if out is not None:
        out.write_text(report.model_dump_json(indent=2) + "\n")
        typer.echo(f"Wrote {out}", err=True)


if __name__ == "__main__":
    app()
