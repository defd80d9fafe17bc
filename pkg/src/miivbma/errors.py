from contextlib import contextmanager

import typer
from rich.console import Console
from rich.markup import escape

stderr = Console(stderr=True)


class MiivbmaError(Exception):
    code = "error"
    exit_code = 1


class ModelSyntaxError(MiivbmaError):
    code = "syntax"
    exit_code = 2

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


class ModelSpecError(MiivbmaError):
    code = "model"
    exit_code = 2


class DataError(MiivbmaError):
    code = "data"
    exit_code = 2


class ConfigError(MiivbmaError):
    code = "config"
    exit_code = 2


class SubsetCapError(MiivbmaError):
    code = "subset-cap"
    exit_code = 2


class IdentificationError(MiivbmaError):
    code = "identification"
    exit_code = 3

    def __init__(self, equation: str, message: str):
        self.equation = equation
        super().__init__(f"equation {equation}: {message}")


class PopulationError(MiivbmaError):
    code = "population"
    exit_code = 3


class NumericalError(MiivbmaError):
    code = "numerical"
    exit_code = 4


class SingularMatrixError(NumericalError):
    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(f"design matrix is rank deficient, collinear: {', '.join(columns)}")


class SarganUndefinedError(NumericalError):
    pass


class SimulationError(MiivbmaError):
    code = "simulation"
    exit_code = 4


@contextmanager
def exit_on_error():
    """Report package errors on stderr with their code and exit with the matching status."""
    try:
        yield
    except MiivbmaError as exc:
        stderr.print(f"[red]{escape(f'error[{exc.code}]: {exc}')}[/]")
        raise typer.Exit(code=exc.exit_code) from exc
