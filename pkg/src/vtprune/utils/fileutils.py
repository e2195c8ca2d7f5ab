"""Utilities for report files and output directories."""

import csv
from pathlib import Path
from typing import Iterable, Sequence, Union

from vtprune.utils.exceptions import ReportIOError


def format_float(value: float) -> str:
    """Shortest text that reads back as exactly ``value``."""
    return repr(float(value))


def ensure_output_dir(directory: Union[str, Path]) -> Path:
    """
    Create an output directory (and its parents) if missing.

    Args:
        directory: Directory to create

    Returns:
        Path: The directory

    Raises:
        ReportIOError: If the path exists as a file or cannot be created
    """
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportIOError(path, str(e)) from e
    return path


def write_csv(
    path: Union[str, Path],
    header: Sequence[str],
    rows: Iterable[Sequence[str]],
) -> Path:
    """
    Write a header and rows as CSV with ``\\n`` line endings.

    Args:
        path: Destination file; parent directories are created
        header: Column names
        rows: Already formatted cells

    Returns:
        Path: The written file

    Raises:
        ReportIOError: If the file cannot be written
    """
    path = Path(path)
    ensure_output_dir(path.parent)
    try:
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise ReportIOError(path, str(e)) from e
    return path


def write_text(path: Union[str, Path], text: str) -> Path:
    """Write ``text`` to ``path``; raises ReportIOError on failure."""
    path = Path(path)
    ensure_output_dir(path.parent)
    try:
        path.write_text(text)
    except OSError as e:
        raise ReportIOError(path, str(e)) from e
    return path


def read_csv(path: Union[str, Path]):
    """Header and rows of a CSV file written by ``write_csv``."""
    path = Path(path)
    try:
        with path.open(newline="") as handle:
            rows = list(csv.reader(handle))
    except OSError as e:
        raise ReportIOError(path, str(e)) from e
    if not rows:
        return [], []
    return rows[0], rows[1:]
