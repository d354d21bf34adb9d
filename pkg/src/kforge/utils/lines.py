"""Utilities for reading the small line-oriented files of a kernel bundle."""

import csv
from collections.abc import Iterator
from pathlib import Path

from kforge.errors import MalformedBundle

COMMENT_PREFIX = "#"


def _data_lines(file_path: Path) -> Iterator[tuple[int, str]]:
    """Yields ``(line_number, line)`` for every non-blank, non-comment line."""
    try:
        with Path.open(file_path, encoding="utf-8") as handle:
            for number, raw in enumerate(handle, start=1):
                line = raw.rstrip("\r\n")
                if not line.strip() or line.lstrip().startswith(COMMENT_PREFIX):
                    continue
                yield number, line
    except FileNotFoundError as e:
        raise MalformedBundle(f"missing file: {file_path}") from e
    except UnicodeDecodeError as e:
        raise MalformedBundle(f"{file_path} is not UTF-8: {e}") from e


def read_rows(file_path: Path, columns: int) -> list[tuple[int, list[str]]]:
    """Reads a tab separated file with a fixed number of columns.

    Args:
        file_path: The TSV file; no quoting, ``#`` comment lines are ignored.
        columns: The exact number of fields every data line must have.

    Returns:
        ``(line_number, fields)`` pairs in file order.
    """
    rows = []
    for number, line in _data_lines(file_path):
        fields = next(csv.reader([line], delimiter="\t", quoting=csv.QUOTE_NONE))
        fields = [item.strip() for item in fields]
        if len(fields) != columns or not all(fields):
            raise MalformedBundle(
                f"{file_path}:{number}: expected {columns} tab separated fields, "
                f"got {line!r}"
            )
        rows.append((number, fields))
    return rows


def read_names(file_path: Path) -> list[str]:
    """Reads one name per line."""
    return [line.strip() for _, line in _data_lines(file_path)]


def parse_hex_field(field: str, where: str) -> int:
    """Parses a hexadecimal address, with or without ``0x`` prefix."""
    try:
        value = int(field, 16)
    except ValueError as e:
        raise MalformedBundle(f"{where}: not a hex address: {field!r}") from e
    if value < 0:
        raise MalformedBundle(f"{where}: negative address: {field!r}")
    return value


def parse_int_field(field: str, where: str) -> int:
    """Parses a non-negative decimal integer."""
    try:
        value = int(field, 10)
    except ValueError as e:
        raise MalformedBundle(f"{where}: not a decimal integer: {field!r}") from e
    if value < 0:
        raise MalformedBundle(f"{where}: negative value: {field!r}")
    return value
