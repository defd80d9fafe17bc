import hashlib
import os
from collections.abc import Sequence
from pathlib import Path
from typing import NamedTuple

import polars as pl
from rich.console import Console

from miivbma.errors import DataError

console = Console(stderr=True)

REPO_DATA = Path(__file__).parents[2] / "data"
FIXTURES = Path(__file__).parent / "fixtures"


class LoadedData(NamedTuple):
    frame: pl.DataFrame
    rows_dropped: int


def get_data_path() -> Path:
    return Path(os.environ.get("MIIVBMA_DATA", REPO_DATA))


def political_democracy_path(data_path: Path | None = None) -> Path:
    return (data_path or get_data_path()) / "political_democracy.csv"


def fixture_path(name: str) -> Path:
    return FIXTURES / f"{name}.lav"


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_csv(path: Path, columns: Sequence[str]) -> LoadedData:
    """
    Read the referenced columns of a CSV file as floats.

    Rows missing any referenced value are dropped listwise; the count is reported on stderr and
    returned alongside the frame.
    """
    try:
        frame = pl.read_csv(path, null_values=["NA", ""], infer_schema_length=None)
    except (OSError, pl.exceptions.PolarsError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    missing = [name for name in columns if name not in frame.columns]
    if missing:
        raise DataError(f"{path} has no column(s) {', '.join(missing)}")
    try:
        frame = frame.select(pl.col(name).cast(pl.Float64) for name in columns)
    except pl.exceptions.PolarsError as exc:
        raise DataError(f"{path} holds non-numeric values: {exc}") from exc

    complete = frame.drop_nulls().filter(pl.all_horizontal(pl.all().is_not_nan()))
    dropped = frame.height - complete.height
    if dropped:
        console.print(f"[yellow]{path.name}: dropped {dropped} incomplete rows[/]")
    if complete.height == 0:
        raise DataError(f"{path} has no complete rows")
    return LoadedData(complete, dropped)
