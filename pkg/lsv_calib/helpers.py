"""File helpers for lsv-calib."""

# MIT License
#
# Copyright (c) 2019 Erik Kalkoken
# Copyright (c) 2024 Dean Thompson

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

logger = logging.getLogger(__name__)


def read_json_file(filepath: Path, quiet: bool = False) -> Optional[Any]:
    """Read a JSON file and return its contents, or None if it is missing or unreadable."""
    if not filepath.is_file():
        if quiet is False:
            logger.warning("file does not exist: %s", filepath)
        return None
    try:
        with filepath.open("r", encoding="utf-8") as file:
            return json.load(file)
    except (IOError, json.JSONDecodeError):
        if quiet is False:
            logger.warning("failed to read from %s: ", filepath, exc_info=True)
        return None


def write_json_file(obj: Any, filepath: Path) -> None:
    """Write `obj` as sorted, indented JSON."""
    logger.info("Writing file: %s", filepath)
    try:
        with filepath.open("w", encoding="utf-8", newline="\n") as file:
            json.dump(obj, file, sort_keys=True, indent=4, ensure_ascii=False)
            file.write("\n")
    except IOError:
        logger.error("failed to write to %s", filepath, exc_info=True)
        raise


def write_csv_file(filepath: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a header row and data rows with '\\n' line ends.

    Floats are written with `repr`, which round-trips float64 exactly.
    """
    logger.info("Writing file: %s", filepath)
    try:
        with filepath.open("w", encoding="utf-8", newline="") as file:
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    except IOError:
        logger.error("failed to write to %s", filepath, exc_info=True)
        raise


def read_csv_file(filepath: Path) -> tuple[list[str], list[list[str]]]:
    """Return (header, rows) of a CSV file."""
    with filepath.open("r", encoding="utf-8", newline="") as file:
        reader = csv.reader(file)
        header = next(reader, [])
        return header, [row for row in reader if row]


def git_blob_hash(filepath: Path) -> str:
    """Hash of a file as `git hash-object` computes it."""
    content = filepath.read_bytes()
    digest = hashlib.sha1(f"blob {len(content)}\0".encode("ascii"))
    digest.update(content)
    return digest.hexdigest()
