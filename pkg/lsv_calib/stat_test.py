"""Statistical study, robust calibration and extrapolation checks on synthetic markets.

A study draws M local-volatility parameter sets xi_m, generates a market
from each, calibrates the full surface and aggregates the per-strike IV
errors. Run m uses the seed derive_seed(master, TAG_RUN, m), so any single
run can be replayed in isolation with `run_single`.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import functools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import mstats

from lsv_calib import report_io, rng, settings
from lsv_calib.calibrate import CalibConfig, CalibrationResult, calibrate_surface, eval_model_ivs
from lsv_calib.exceptions import ConfigError, InvalidInputError, LsvCalibError
from lsv_calib.ground_truth import HEDGE_VOL_POLICIES, PERTURBATION_RADIUS, gen_synthetic_market, perturb_xi, sample_xi
from lsv_calib.locales import LocaleHelper
from lsv_calib.lsv_sim import LeverageModel
from lsv_calib.market_data import GridSpec, SabrParams, SmileGrid, XiParams

logger = logging.getLogger(__name__)

QUANTILES = (0.15, 0.30, 0.70, 0.95)
ERRORS_FILE = "errors.csv"
SUMMARY_FILE = "stat_summary.json"


@dataclass(frozen=True)
class RunConfig:
    """Run-level settings of a command plus the calibration configuration it uses."""

    preset: Optional[str] = None
    seed: int = 0
    jobs: int = 1
    sample_count: int = 5
    market_paths: int = settings.MARKET_PATHS
    n_maturities: Optional[int] = None
    hedge_vol: str = settings.GROUND_TRUTH_HEDGE_VOL
    perturbation_count: int = 4
    perturbation_radius: float = PERTURBATION_RADIUS
    extrapolation_factor: float = 1.5
    calib: CalibConfig = field(default_factory=CalibConfig)

    def __post_init__(self) -> None:
        if min(self.jobs, self.sample_count, self.market_paths, self.perturbation_count) < 1:
            raise ConfigError("jobs, sample_count, market_paths and perturbation_count must be >= 1")
        if self.hedge_vol not in HEDGE_VOL_POLICIES:
            raise ConfigError(f"hedge_vol must be one of {HEDGE_VOL_POLICIES}, got {self.hedge_vol!r}")
        if self.n_maturities is not None and not 1 <= self.n_maturities <= len(GridSpec().maturities):
            raise ConfigError(f"n_maturities must lie in [1, {len(GridSpec().maturities)}]")
        if not (self.perturbation_radius >= 0.0 and self.extrapolation_factor > 0.0):
            raise ConfigError("perturbation_radius must be >= 0 and extrapolation_factor > 0")

    @classmethod
    def from_sources(
        cls,
        preset: Optional[str] = None,
        file_values: Optional[Mapping[str, Any]] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "RunConfig":
        """Configured defaults < preset < run-config file < command-line overrides.

        Raises:
            ConfigError: unknown keys or invalid values.
        """
        layered: dict[str, Any] = dict(file_values or {})
        layered.update({key: value for key, value in (overrides or {}).items() if value is not None})
        preset = layered.pop("preset", None) or preset
        if preset is not None and preset not in settings.PRESETS:
            raise ConfigError(f"unknown preset {preset!r}, choose from {sorted(settings.PRESETS)}")

        run_keys = {f.name for f in fields(cls)} - {"calib", "preset"}
        calib_keys = {f.name for f in fields(CalibConfig)}
        unknown = set(layered) - run_keys - calib_keys
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")

        run_values = {key: value for key, value in settings.PRESETS.get(preset, {}).items() if key in run_keys}
        run_values.update({key: value for key, value in layered.items() if key in run_keys})
        calib = CalibConfig.from_settings(preset, {key: value for key, value in layered.items() if key in calib_keys})
        return cls(preset=preset, calib=calib, **run_values)

    def grid(self) -> GridSpec:
        grid = GridSpec()
        return grid.truncated(self.n_maturities) if self.n_maturities else grid

    def to_dict(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "calib"}
        data["calib"] = self.calib.to_dict()
        return data


def generate_market(xi: XiParams, config: RunConfig, seed: int, grid: Optional[GridSpec] = None) -> SmileGrid:
    calib = config.calib
    return gen_synthetic_market(
        xi,
        grid or config.grid(),
        n_paths=config.market_paths,
        dt=calib.dt,
        seed=seed,
        hedge_vol=config.hedge_vol,
        block_size=calib.path_block,
        workers=calib.workers,
    )


@dataclass
class RunRecord:
    """Outcome of one study run; `abs_errors` has shape (maturities, strikes) unless skipped."""

    run_id: int
    seed: int
    xi: dict[str, float]
    skipped: bool = False
    skip_reason: Optional[str] = None
    wall_time: float = 0.0
    abs_errors: Optional[np.ndarray] = None
    error_rows: list[tuple] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        finite = self.abs_errors is not None and np.all(np.isfinite(self.abs_errors))
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "xi": self.xi,
            "skipped": self.skipped,
            "skip_reason": self.skip_reason,
            "wall_time": self.wall_time,
            "max_error": float(np.max(self.abs_errors)) if finite else None,
            "mean_error": float(np.mean(self.abs_errors)) if finite else None,
        }


def run_seed(master_seed: int, run_id: int) -> int:
    return rng.derive_seed(master_seed, rng.TAG_RUN, run_id)


def run_single(run_id: int, master_seed: int, config: RunConfig) -> RunRecord:
    """Sample xi, generate its market and calibrate; any failure turns the run into a skip."""
    started = time.perf_counter()
    seed = run_seed(master_seed, run_id)
    xi = sample_xi(rng.derive_seed(seed, rng.TAG_MARKET, 0))
    record = RunRecord(run_id=run_id, seed=seed, xi=xi.to_dict())
    try:
        market = generate_market(xi, config, rng.derive_seed(seed, rng.TAG_MARKET, 1))
        if market.has_skips:
            raise InvalidInputError("market implied vol inversion failed")
        result = calibrate_surface(market, config.calib, seed)
    except LsvCalibError as ex:
        record.skipped, record.skip_reason = True, ex.message
        logger.warning("Skipping run %d (seed %d): %s", run_id, seed, ex.message)
        record.wall_time = time.perf_counter() - started
        return record

    skipped = [s for s in result.report.slices if s.skipped]
    if skipped:
        record.skipped = True
        record.skip_reason = f"slice {skipped[0].index + 1}: {skipped[0].skip_reason}"
        logger.warning("Skipping run %d (seed %d): %s", run_id, seed, record.skip_reason)
    else:
        record.abs_errors = np.array([s.abs_error for s in result.report.slices], dtype=float)
        for s in result.report.slices:
            for j, (strike, iv_mkt, iv_mod, err) in enumerate(zip(s.strikes, s.iv_market, s.iv_model, s.abs_error)):
                record.error_rows.append((run_id, s.index, j, strike, iv_mkt, iv_mod, err))
    record.wall_time = time.perf_counter() - started
    return record


@dataclass
class StatSummary:
    """Per (maturity, strike) mean and quantiles of the absolute IV error over completed runs."""

    master_seed: int
    maturities: tuple[float, ...]
    strikes: list[list[float]]
    mean_abs_error: np.ndarray
    quantiles: dict[float, np.ndarray]
    runs: list[RunRecord]

    @property
    def run_count(self) -> int:
        return len(self.runs)

    @property
    def skip_count(self) -> int:
        return sum(1 for r in self.runs if r.skipped)

    def to_dict(self) -> dict[str, Any]:
        def table(values: np.ndarray) -> list[list[Optional[float]]]:
            return [[float(v) if math.isfinite(v) else None for v in row] for row in values]

        return {
            "master_seed": self.master_seed,
            "run_count": self.run_count,
            "skip_count": self.skip_count,
            "maturities": list(self.maturities),
            "strikes": self.strikes,
            "mean_abs_error": table(self.mean_abs_error),
            "quantiles": {str(q): table(values) for q, values in self.quantiles.items()},
            "runs": [r.to_dict() for r in self.runs],
        }


def summarize(records: Sequence[RunRecord], grid: GridSpec, master_seed: int) -> StatSummary:
    """Aggregate completed runs; skipped runs only enter the skip count."""
    shape = (len(grid.maturities), grid.strikes_per_maturity)
    completed = [r.abs_errors for r in records if not r.skipped and r.abs_errors is not None]
    if completed:
        errors = np.stack(completed).reshape(len(completed), -1)
        mean = errors.mean(axis=0).reshape(shape)
        cuts = np.ma.filled(mstats.mquantiles(errors, prob=QUANTILES, alphap=1.0, betap=1.0, axis=0), np.nan)
        quantiles = {q: np.asarray(cuts[k]).reshape(shape) for k, q in enumerate(QUANTILES)}
    else:
        mean = np.full(shape, np.nan)
        quantiles = {q: np.full(shape, np.nan) for q in QUANTILES}
    return StatSummary(
        master_seed=master_seed,
        maturities=tuple(grid.maturities),
        strikes=[grid.strikes(i).tolist() for i in range(len(grid.maturities))],
        mean_abs_error=mean,
        quantiles=quantiles,
        runs=list(records),
    )


def run_stat_test(config: RunConfig, out_dir: Path, locale_helper: Optional[LocaleHelper] = None) -> StatSummary:
    """Run `config.sample_count` calibrations over a process pool and write the errors CSV and summary JSON.

    Results are gathered in run order whatever the number of jobs.
    """
    locale_helper = locale_helper or LocaleHelper()
    out_dir.mkdir(parents=True, exist_ok=True)
    run = functools.partial(run_single, master_seed=config.seed, config=config)
    run_ids = range(config.sample_count)
    logger.info(
        "Statistical study: %s runs, master seed %d, %d jobs",
        locale_helper.format_count(config.sample_count),
        config.seed,
        config.jobs,
    )
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            records = list(pool.map(run, run_ids))
    else:
        records = [run(run_id) for run_id in run_ids]

    summary = summarize(records, config.grid(), config.seed)
    errors_path = out_dir / ERRORS_FILE
    report_io.write_errors_csv([row for r in records for row in r.error_rows], errors_path)
    report_io.write_report(
        {"config": config.to_dict(), "summary": summary.to_dict()},
        "stat-test",
        "stat_summary",
        out_dir / SUMMARY_FILE,
        artifacts=report_io.artifact_hashes([errors_path], out_dir),
        locale_helper=locale_helper,
    )
    logger.info(
        "Study finished: %d of %d runs skipped, mean error %s",
        summary.skip_count,
        summary.run_count,
        locale_helper.format_iv_error(float(np.nanmean(summary.mean_abs_error)))
        if summary.skip_count < summary.run_count
        else "n/a",
    )
    return summary


@dataclass
class RobustResult:
    calibration: CalibrationResult
    markets: list[SmileGrid]
    envelope_share: float


def envelope_share(slices: Sequence[Any], markets: Sequence[SmileGrid]) -> float:
    """Share of calibrated strikes whose model IV lies in the [min, max] range of the markets' IVs."""
    inside, total = 0, 0
    for entry in slices:
        if entry.skipped:
            continue
        ivs = np.stack([m.slices[entry.index].ivs for m in markets])
        model = np.array([math.nan if v is None else v for v in entry.iv_model], dtype=float)
        valid = np.isfinite(model) & np.all(np.isfinite(ivs), axis=0)
        inside += int(np.sum((model >= ivs.min(axis=0)) & (model <= ivs.max(axis=0)) & valid))
        total += int(np.sum(valid))
    return inside / total if total else math.nan


def run_robust(xi: XiParams, config: RunConfig, seed: int) -> RobustResult:
    """Calibrate to `perturbation_count` perturbed copies of xi at once.

    All perturbed markets share one path seed, so they differ by their
    parameters only.
    """
    perturbed = perturb_xi(
        xi, config.perturbation_radius, config.perturbation_count, rng.derive_seed(seed, rng.TAG_PERTURB)
    )
    market_seed = rng.derive_seed(seed, rng.TAG_MARKET)
    markets = [generate_market(p, config, market_seed) for p in perturbed]
    result = calibrate_surface(markets[0], config.calib, seed, robust_markets=markets)
    share = envelope_share(result.report.slices, markets)
    logger.info("Robust calibration: %.1f%% of strikes inside the envelope", 100.0 * share)
    return RobustResult(result, markets, share)


@dataclass
class ExtrapolationReport:
    """Model vs ground-truth IVs on a strike grid widened by `factor`."""

    factor: float
    rows: list[tuple]
    per_maturity: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {"factor": self.factor, "per_maturity": self.per_maturity}


def extrapolation_report(
    model: LeverageModel,
    sabr: SabrParams,
    xi: XiParams,
    config: RunConfig,
    seed: int,
    factor: Optional[float] = None,
    out: Optional[Path] = None,
) -> ExtrapolationReport:
    """Compare the calibrated model to the ground truth outside the training strikes.

    Points whose IV cannot be inverted on either side are kept with NaN and
    counted as flagged.
    """
    factor = config.extrapolation_factor if factor is None else factor
    base = GridSpec().truncated(len(model.maturities))
    if base.maturities != model.maturities:
        raise InvalidInputError(f"model maturities {model.maturities} do not match the grid {base.maturities}")
    widened = base.widened(factor)
    truth = generate_market(xi, config, rng.derive_seed(seed, rng.TAG_MARKET), widened)
    model_slices = eval_model_ivs(
        model, sabr, widened, config.calib.eval_paths, rng.derive_seed(seed, rng.TAG_EVAL), config.calib
    )

    rows, per_maturity = [], []
    for i, (true_slice, model_slice) in enumerate(zip(truth.slices, model_slices)):
        low, high = base.strikes(i)[0], base.strikes(i)[-1]
        errors = np.abs(model_slice.ivs - true_slice.ivs)
        in_sample = (true_slice.strikes >= low - 1e-12) & (true_slice.strikes <= high + 1e-12)
        for strike, iv_true, iv_model, err, inside in zip(
            true_slice.strikes, true_slice.ivs, model_slice.ivs, errors, in_sample
        ):
            rows.append((true_slice.maturity, float(strike), float(iv_true), float(iv_model), float(err), bool(inside)))
        finite = np.isfinite(errors)
        per_maturity.append(
            {
                "maturity": true_slice.maturity,
                "mean_error": float(errors[finite].mean()) if finite.any() else None,
                "max_error": float(errors[finite].max()) if finite.any() else None,
                "out_of_sample_mean_error": float(errors[finite & ~in_sample].mean())
                if (finite & ~in_sample).any()
                else None,
                "flagged": int((~finite).sum()),
            }
        )
    if out is not None:
        report_io.write_extrapolation_csv(rows, out)
    return ExtrapolationReport(factor, rows, per_maturity)
