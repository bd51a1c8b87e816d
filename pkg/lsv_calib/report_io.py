"""CSV and JSON artifacts: markets, IV comparisons, error tables, leverage grids and versioned reports.

CSV files have a header row, '.' as radix, '\\n' line ends and floats written
with full float64 precision. JSON reports carry a format version, the
configuration they were produced with and git-style hashes of the files
they describe; the only non-reproducible field is the timestamp in
"metadata". Every JSON document is validated against its schema in
`lsv_calib/schemas/` before it is written.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import functools
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import jsonschema
import numpy as np
from jsonschema.exceptions import best_match

from lsv_calib import __version__, helpers, settings
from lsv_calib.exceptions import ConfigError, InvalidInputError
from lsv_calib.locales import LocaleHelper
from lsv_calib.market_data import SabrParams, SmileGrid, SmileSlice, XiParams

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
CONFIG_VERSION = 1

MARKET_HEADER = ("maturity", "strike", "price", "implied_vol", "std_err")
IV_COMPARISON_HEADER = ("maturity", "strike", "iv_market", "iv_model", "abs_error", "std_err")
ERRORS_HEADER = ("run_id", "maturity_idx", "strike_idx", "strike", "iv_market", "iv_model", "abs_error")
LEVERAGE_HEADER = ("t", "log_spot", "leverage_sq")
EXTRAPOLATION_HEADER = ("maturity", "strike", "iv_true", "iv_model", "abs_error", "in_sample")
PRICE_HEADER = ("maturity", "strike", "call_price", "implied_vol", "std_err", "variance_reduction")

_SABR_FILE = "sabr.json"


@functools.lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    """The checked-in schema `<name>.schema.json`."""
    path = settings.SCHEMAS_PATH / f"{name}.schema.json"
    schema = helpers.read_json_file(path)
    if schema is None:
        raise ConfigError(f"missing schema document {path}")
    return schema


def validate_document(document: Any, schema_name: str) -> None:
    """Raises ConfigError with the offending JSON path when `document` violates the schema."""
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    error = best_match(validator.iter_errors(document))
    if error is not None:
        location = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name}: {error.message} at {location}")


def read_run_config(path: Path) -> dict[str, Any]:
    """Validated contents of a run-config JSON file, without the version key.

    Raises:
        FileNotFoundError: the file does not exist.
        ConfigError: the file is not JSON or violates the run-config schema.
    """
    if not path.is_file():
        raise FileNotFoundError(path)
    data = helpers.read_json_file(path)
    if data is None:
        raise ConfigError(f"{path} is not a valid JSON document")
    validate_document(data, "run_config")
    return {key: value for key, value in data.items() if key != "config_version"}


def write_market_csv(grid: SmileGrid, path: Path) -> None:
    """One row per (maturity, strike); skipped quotes have implied_vol 'nan'."""
    rows = [
        (s.maturity, float(k), float(p), float(iv), float(se))
        for s in grid.slices
        for k, p, iv, se in zip(s.strikes, s.prices, s.ivs, s.std_errs)
    ]
    helpers.write_csv_file(path, MARKET_HEADER, rows)


def read_market_csv(path: Path, spot: float = 1.0) -> SmileGrid:
    """Load a market CSV written by `write_market_csv`.

    Raises:
        FileNotFoundError: the file does not exist.
        InvalidInputError: the header or a row is malformed.
    """
    header, rows = helpers.read_csv_file(path)
    if tuple(header) != MARKET_HEADER:
        raise InvalidInputError(f"{path}: expected header {','.join(MARKET_HEADER)}, got {','.join(header)}")
    by_maturity: dict[float, list[tuple[float, ...]]] = {}
    try:
        for row in rows:
            values = tuple(float(v) for v in row)
            if len(values) != len(MARKET_HEADER):
                raise ValueError(f"row has {len(values)} fields")
            by_maturity.setdefault(values[0], []).append(values[1:])
    except ValueError as ex:
        raise InvalidInputError(f"{path}: {ex}") from ex
    slices = []
    for maturity in sorted(by_maturity):
        table = np.array(sorted(by_maturity[maturity]))
        ivs = table[:, 2]
        slices.append(
            SmileSlice(
                maturity=maturity,
                strikes=table[:, 0],
                prices=table[:, 1],
                ivs=ivs,
                std_errs=table[:, 3],
                skipped=~np.isfinite(ivs),
            )
        )
    logger.info("Loaded market %s: %d maturities", path, len(slices))
    return SmileGrid(slices, spot)


def iv_comparison_rows(report_slices: Sequence[Mapping[str, Any]]) -> list[tuple]:
    rows = []
    for entry in report_slices:
        for values in zip(
            entry["strikes"], entry["iv_market"], entry["iv_model"], entry["abs_error"], entry["iv_std_err"]
        ):
            rows.append((float(entry["maturity"]), *(math.nan if v is None else float(v) for v in values)))
    return rows


def write_iv_comparison_csv(report_slices: Sequence[Mapping[str, Any]], path: Path) -> None:
    """Per-strike market vs model IV of a calibration report's slices."""
    helpers.write_csv_file(path, IV_COMPARISON_HEADER, iv_comparison_rows(report_slices))


def write_errors_csv(rows: Iterable[Sequence[Any]], path: Path) -> None:
    helpers.write_csv_file(path, ERRORS_HEADER, rows)


def write_leverage_csv(times: Sequence[float], log_spots: Sequence[float], table: np.ndarray, path: Path) -> None:
    """L^2 on a (time, log-spot) grid in long format."""
    rows = [
        (float(t), float(x), float(table[a, b]))
        for a, t in enumerate(times)
        for b, x in enumerate(log_spots)
    ]
    helpers.write_csv_file(path, LEVERAGE_HEADER, rows)


def write_price_csv(rows: Iterable[Sequence[Any]], path: Path) -> None:
    """Model call prices with their control-variate standard errors and variance reduction factors."""
    helpers.write_csv_file(path, PRICE_HEADER, rows)


def write_extrapolation_csv(rows: Iterable[Sequence[Any]], path: Path) -> None:
    helpers.write_csv_file(path, EXTRAPOLATION_HEADER, rows)


def save_sabr(sabr: SabrParams, directory: Path) -> Path:
    path = directory / _SABR_FILE
    helpers.write_json_file(sabr.to_dict(), path)
    return path


def load_sabr(directory: Path) -> SabrParams:
    data = helpers.read_json_file(directory / _SABR_FILE)
    if data is None:
        raise FileNotFoundError(directory / _SABR_FILE)
    return SabrParams.from_dict(data)


def load_xi(path: Path) -> XiParams:
    """xi from a market metadata file or from a plain {p1, p2, sigma0, sigma1, sigma2} object."""
    data = helpers.read_json_file(path)
    if data is None:
        raise FileNotFoundError(path)
    if "market" in data:
        data = data["market"]["xi"]
    try:
        return XiParams.from_dict(data)
    except KeyError as ex:
        raise InvalidInputError(f"{path}: missing xi component {ex}") from ex


def artifact_hashes(paths: Iterable[Path], root: Path) -> dict[str, str]:
    """git blob hashes keyed by path relative to `root`."""
    hashes = {}
    for path in sorted(paths):
        try:
            name = path.relative_to(root).as_posix()
        except ValueError:
            name = path.name
        hashes[name] = helpers.git_blob_hash(path)
    return hashes


def write_report(
    body: Mapping[str, Any],
    kind: str,
    schema_name: str,
    path: Path,
    artifacts: Optional[Mapping[str, str]] = None,
    locale_helper: Optional[LocaleHelper] = None,
) -> dict[str, Any]:
    """Wrap `body` in the versioned envelope, validate it and write it as JSON.

    Raises:
        ConfigError: the document violates its schema.
    """
    locale_helper = locale_helper or LocaleHelper()
    document = {
        "version": REPORT_VERSION,
        "kind": kind,
        "metadata": {"timestamp": locale_helper.timestamp_str(), "lsv_calib_version": __version__},
        "artifacts": dict(artifacts or {}),
        **body,
    }
    validate_document(document, schema_name)
    helpers.write_json_file(document, path)
    return document
