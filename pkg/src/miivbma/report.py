import rich
from rich.table import Table

from miivbma.models import (
    BmaEquationResult,
    CoefficientRow,
    EquationEstimate,
    EquationReport,
    EstimationEquation,
    FitReport,
    SarganRow,
)


def fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def two_sls_report(
    equation: EstimationEquation, estimate: EquationEstimate, alpha: float, note: str | None = None
) -> EquationReport:
    sargan = None
    if estimate.sargan_p is not None:
        sargan = SarganRow(
            kind="classical",
            p=estimate.sargan_p,
            stat=estimate.sargan_stat,
            df=estimate.sargan_df,
            reject=estimate.sargan_p < alpha,
        )
    elif note is None:
        note = "just-identified, Sargan test unavailable"
    return EquationReport(
        outcome=equation.outcome,
        estimator="2sls",
        regressors=equation.regressors,
        miivs=equation.miivs,
        coefficients=[
            CoefficientRow(name=name, estimate=float(theta), se=float(se))
            for name, theta, se in zip(estimate.names, estimate.theta, estimate.se)
        ],
        sargan=sargan,
        note=note,
    )


def bma_report(
    equation: EstimationEquation, result: BmaEquationResult, alpha: float, audit: bool = False
) -> EquationReport:
    return EquationReport(
        outcome=equation.outcome,
        estimator="2sbma",
        regressors=equation.regressors,
        miivs=equation.miivs,
        coefficients=[
            CoefficientRow(name=name, estimate=theta, se=se)
            for name, theta, se in zip(result.names, result.theta, result.se)
        ],
        sargan=SarganRow(kind="bma", p=result.bma_sargan_p, reject=result.bma_sargan_p < alpha),
        instruments=result.instruments,
        ranked_suspects=result.ranked_suspects,
        suspects_tied=result.suspects_tied,
        subsets=result.subset_fits if audit else None,
        dropped_subsets=result.dropped_subsets,
    )


def equation_table(report: EquationReport) -> Table:
    title = f"{report.outcome} ~ {' + '.join(report.regressors)} ({report.estimator})"
    table = Table(title=title, title_justify="left")
    table.add_column("Parameter", style="cyan")
    table.add_column("Estimate", justify="right")
    table.add_column("SE", justify="right")
    for row in report.coefficients:
        table.add_row(row.name, fmt(row.estimate), fmt(row.se))
    return table


def instrument_table(report: EquationReport) -> Table:
    table = Table(title=f"{report.outcome} instruments", title_justify="left")
    table.add_column("Instrument", style="cyan")
    table.add_column("P(q)", justify="right")
    table.add_column("IS-Sargan p", justify="right")
    table.add_column("Rank", justify="right")
    table.add_column("Weak", style="yellow")
    rank = {name: i + 1 for i, name in enumerate(report.ranked_suspects)}
    for item in report.instruments:
        table.add_row(
            item.name,
            fmt(item.inclusion_prob),
            fmt(item.is_sargan_p),
            str(rank[item.name]),
            "weak" if item.weak else "",
        )
    return table


def sargan_line(report: EquationReport) -> str:
    sargan = report.sargan
    label = "Sargan" if sargan.kind == "classical" else "BMA-S"
    stat = f" stat {fmt(sargan.stat)}, df {sargan.df}," if sargan.stat is not None else ""
    verdict = "[red]reject[/]" if sargan.reject else "[green]retain[/]"
    return f"{label}{stat} p {fmt(sargan.p)} {verdict}"


def print_report(report: FitReport):
    for equation in report.equations:
        rich.print(equation_table(equation))
        rich.print(f"MIIVs: {', '.join(equation.miivs)}")
        if equation.sargan is not None:
            rich.print(sargan_line(equation))
        if equation.instruments:
            rich.print(instrument_table(equation))
            suspect = equation.ranked_suspects[0]
            tied = " (tied)" if equation.suspects_tied else ""
            rich.print(f"Prime suspect: [bold]{suspect}[/]{tied}")
        if equation.dropped_subsets:
            rich.print(f"[yellow]{len(equation.dropped_subsets)} singular subsets dropped[/]")
        if equation.note:
            rich.print(f"[dim]{equation.note}[/]")
        rich.print()
    provenance = report.provenance
    rich.print(
        f"[dim]{provenance.rows_used} rows used, {provenance.rows_dropped} dropped, "
        f"miivbma {provenance.version}[/]"
    )
