"""Command line interface."""

# MIT License
#
# Copyright (c) 2019 Erik Kalkoken
# Copyright (c) 2024 Dean Thompson

import argparse
import logging
import logging.config
import sys
import zoneinfo
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from babel import Locale, UnknownLocaleError

from lsv_calib import __version__, report_io, rng, settings
from lsv_calib.calibrate import calibrate_surface, eval_option_groups
from lsv_calib.exceptions import ConfigError, DivergenceError, InvalidInputError, LsvCalibError
from lsv_calib.ground_truth import sample_xi
from lsv_calib.locales import LocaleHelper
from lsv_calib.lsv_sim import LeverageModel, leverage_table
from lsv_calib.market_data import GridSpec, OptionGroup
from lsv_calib.stat_test import RunConfig, extrapolation_report, generate_market, run_robust, run_stat_test

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DIVERGED = 5


def main():
    """Entry point of the `lsv-calib` console script."""
    logging.config.dictConfig(settings.DEFAULT_LOGGING)
    sys.exit(dispatch(sys.argv[1:]))


def dispatch(argv: Sequence[str]) -> int:
    """Parse `argv`, run the subcommand and return the process exit status."""
    try:
        args = _parse_args(list(argv))
    except SystemExit as ex:
        return EXIT_OK if ex.code in (0, None) else EXIT_USAGE

    try:
        locale_helper = LocaleHelper(_parse_formatter_locale(args), _parse_formatter_timezone(args))
        config = _run_config(args)
        handler = _HANDLERS[args.command]
        handler(args, config, locale_helper)
    except DivergenceError as ex:
        _error(f"calibration aborted: {ex.message}")
        return EXIT_DIVERGED
    except ConfigError as ex:
        _error(f"invalid configuration: {ex.message}")
        return EXIT_CONFIG
    except InvalidInputError as ex:
        _error(f"invalid input: {ex.message}")
        return EXIT_CONFIG
    except OSError as ex:
        _error(f"I/O failure: {ex}")
        return EXIT_IO
    except LsvCalibError as ex:
        _error(ex.message)
        return EXIT_ERROR
    return EXIT_OK


def _error(text: str) -> None:
    logger.error(text)
    print(f"ERROR: {text}", file=sys.stderr)


def _parse_args(args: list[str]) -> argparse.Namespace:
    """
    Defines and parses command-line arguments.

    Args:
        args: A list of command-line arguments, excluding the program name.

    Returns:
        An argparse.Namespace object containing the parsed command-line arguments.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, help="Run-config JSON file (see lsv_calib/schemas/run_config.schema.json)"
    )
    common.add_argument("--seed", type=int, help="Master seed; every random stream is derived from it")
    common.add_argument("--jobs", type=int, help="Worker processes for stat-test runs")
    common.add_argument(
        "--preset",
        choices=sorted(settings.PRESETS),
        help="Named scale preset: 'paper' is the full-scale study, 'desk' fits a workstation, 'smoke' fits CI",
    )
    common.add_argument("--out", type=Path, help="Output file or directory, depending on the command")
    common.add_argument("--market", type=Path, help="Market CSV (maturity,strike,price,implied_vol,std_err)")
    common.add_argument("--model", type=Path, help="Directory of a calibrated model")
    common.add_argument(
        "--xi", type=Path, help="JSON file with the ground-truth parameters, or a market metadata file"
    )
    common.add_argument("--paths", type=int, dest="market_paths", help="Paths used to generate markets")
    common.add_argument("--maturities", type=int, dest="n_maturities", help="Use only the first N maturities")
    common.add_argument(
        "--quiet",
        action="store_true",
        help="When provided will not generate normal console output, but still show errors",
    )
    common.add_argument(
        "--formatter_timezone",
        help="Timezone for report timestamps, such as 'Europe/Berlin'. Defaults to the process timezone.",
    )
    common.add_argument(
        "--formatter_locale",
        help="IETF language tag for console number formatting, e.g. 'de-DE'. Defaults to the process locale.",
    )

    my_arg_parser = argparse.ArgumentParser(
        prog="lsv-calib",
        description=(
            "Monte Carlo calibration of neural leverage functions in SABR-LSV models\n"
            "to synthetic implied-volatility surfaces.\n"
            "\n"
            "Example: lsv-calib gen-market --seed 7 --out market.csv\n"
            "         lsv-calib calibrate --market market.csv --preset desk --out model/"
        ),
        formatter_class=argparse.RawTextHelpFormatter,
    )
    my_arg_parser.add_argument(
        "--version",
        help="Show the program version and exit",
        action="version",
        version=__version__,
    )
    commands = my_arg_parser.add_subparsers(dest="command", required=True, metavar="command")
    commands.add_parser("gen-market", parents=[common], help="Generate a synthetic market from the ground-truth model")
    commands.add_parser("calibrate", parents=[common], help="Calibrate a leverage model to a market CSV")
    commands.add_parser("robust", parents=[common], help="Calibrate against several perturbed markets at once")
    stat = commands.add_parser("stat-test", parents=[common], help="Run the statistical calibration study")
    stat.add_argument("--samples", type=int, dest="sample_count", help="Number of sampled parameter sets")
    price = commands.add_parser("price", parents=[common], help="Price a market grid with a calibrated model")
    price.add_argument("--leverage-out", type=Path, help="Also write L^2 on a (t, log S) grid to this CSV")
    extrapolate = commands.add_parser(
        "extrapolate", parents=[common], help="Compare a model to the ground truth on a widened grid"
    )
    extrapolate.add_argument("--factor", type=float, help="Strike range multiplier (default 1.5)")
    return my_arg_parser.parse_args(args)


def _parse_formatter_timezone(args: argparse.Namespace) -> Optional[zoneinfo.ZoneInfo]:
    if args.formatter_timezone is None:
        return None
    try:
        return zoneinfo.ZoneInfo(args.formatter_timezone)
    except (ValueError, zoneinfo.ZoneInfoNotFoundError) as ex:
        raise ConfigError(f"unknown timezone {args.formatter_timezone!r}") from ex


def _parse_formatter_locale(args: argparse.Namespace) -> Optional[Locale]:
    if args.formatter_locale is None:
        return None
    try:
        return Locale.parse(args.formatter_locale, sep="-")
    except (UnknownLocaleError, ValueError) as ex:
        raise ConfigError(f"provided locale string {args.formatter_locale!r} is not valid") from ex


def _run_config(args: argparse.Namespace) -> RunConfig:
    file_values = report_io.read_run_config(args.config) if args.config else None
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "market_paths": args.market_paths,
        "n_maturities": args.n_maturities,
        "sample_count": getattr(args, "sample_count", None),
        "extrapolation_factor": getattr(args, "factor", None),
    }
    return RunConfig.from_sources(args.preset, file_values, overrides)


def _say(args: argparse.Namespace, text: str) -> None:
    if not args.quiet:
        print(text)


def _require(value: Optional[Path], flag: str) -> Path:
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _xi(args: argparse.Namespace, config: RunConfig):
    if args.xi is not None:
        return report_io.load_xi(args.xi)
    return sample_xi(rng.derive_seed(config.seed, rng.TAG_MARKET, 0))


def _gen_market(args: argparse.Namespace, config: RunConfig, locale_helper: LocaleHelper) -> None:
    out = args.out or Path("market.csv")
    xi = _xi(args, config)
    seed = rng.derive_seed(config.seed, rng.TAG_MARKET, 1)
    _say(args, f"Generating market with {locale_helper.format_count(config.market_paths)} paths...")
    market = generate_market(xi, config, seed)
    report_io.write_market_csv(market, out)
    meta_path = out.with_suffix(".json")
    report_io.write_report(
        {
            "market": {
                "seed": config.seed,
                "n_paths": config.market_paths,
                "dt": config.calib.dt,
                "spot": market.spot,
                "hedge_vol": config.hedge_vol,
                "skipped_quotes": int(sum(np.sum(s.skipped) for s in market.slices)),
                "xi": xi.to_dict(),
            }
        },
        "market",
        "market",
        meta_path,
        artifacts=report_io.artifact_hashes([out], out.parent),
        locale_helper=locale_helper,
    )
    _say(args, f"Wrote market to {out} and {meta_path}")


def _write_calibration(out: Path, result, locale_helper: LocaleHelper, kind: str, extra: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    written = result.model.save(out)
    written.append(report_io.save_sabr(result.sabr, out))
    report = result.report.to_dict()
    comparison = out / "iv_comparison.csv"
    report_io.write_iv_comparison_csv(report["slices"], comparison)
    written.append(comparison)
    report_path = out / "calib_report.json"
    report_io.write_report(
        {"report": report, **(extra or {})},
        kind,
        "calib_report",
        report_path,
        artifacts=report_io.artifact_hashes(written, out),
        locale_helper=locale_helper,
    )
    return report_path


def _print_slices(args: argparse.Namespace, result, locale_helper: LocaleHelper) -> None:
    for entry in result.report.slices:
        if entry.skipped:
            _say(args, f"  T={entry.maturity}: skipped ({entry.skip_reason})")
        else:
            _say(
                args,
                f"  T={entry.maturity}: max error {locale_helper.format_iv_error(entry.max_error)}, "
                f"mean {locale_helper.format_iv_error(entry.mean_error)}, "
                f"{locale_helper.format_count(entry.steps)} steps, {locale_helper.format_seconds(entry.wall_time)}",
            )


def _calibrate(args: argparse.Namespace, config: RunConfig, locale_helper: LocaleHelper) -> None:
    market = report_io.read_market_csv(_require(args.market, "--market"))
    if config.n_maturities:
        market = market.truncated(config.n_maturities)
    _say(args, f"Calibrating {len(market.slices)} maturities...")
    result = calibrate_surface(market, config.calib, config.seed)
    report_path = _write_calibration(args.out or Path("model"), result, locale_helper, "calibration")
    _print_slices(args, result, locale_helper)
    _say(args, f"Wrote model and report to {report_path.parent}")


def _robust(args: argparse.Namespace, config: RunConfig, locale_helper: LocaleHelper) -> None:
    xi = _xi(args, config)
    _say(args, f"Calibrating against {config.perturbation_count} perturbed markets...")
    robust = run_robust(xi, config, config.seed)
    out = args.out or Path("robust")
    report_path = _write_calibration(
        out, robust.calibration, locale_helper, "robust", {"envelope_share": _optional(robust.envelope_share)}
    )
    for m, market in enumerate(robust.markets):
        report_io.write_market_csv(market, out / f"market_{m + 1}.csv")
    _print_slices(args, robust.calibration, locale_helper)
    _say(args, f"Model IV inside the envelope for {locale_helper.format_share(robust.envelope_share)} of strikes")
    _say(args, f"Wrote model and report to {report_path.parent}")


def _optional(value: float) -> Optional[float]:
    return value if np.isfinite(value) else None


def _stat_test(args: argparse.Namespace, config: RunConfig, locale_helper: LocaleHelper) -> None:
    out = args.out or Path("stat_test")
    _say(args, f"Running {locale_helper.format_count(config.sample_count)} calibrations with {config.jobs} jobs...")
    summary = run_stat_test(config, out, locale_helper)
    _say(args, f"{summary.skip_count} of {summary.run_count} runs skipped")
    _say(args, f"Wrote {out / 'errors.csv'} and {out / 'stat_summary.json'}")


def _price(args: argparse.Namespace, config: RunConfig, locale_helper: LocaleHelper) -> None:
    model_dir = _require(args.model, "--model")
    model = LeverageModel.load(model_dir)
    sabr = report_io.load_sabr(model_dir)
    if args.market is not None:
        market = report_io.read_market_csv(args.market, spot=sabr.s0)
        maturities = market.maturities
        groups = [OptionGroup.calibration_set(s.maturity, s.strikes, market.spot) for s in market.slices]
    else:
        grid = GridSpec().truncated(len(model.maturities))
        maturities = grid.maturities
        groups = [OptionGroup.calibration_set(t, grid.strikes(i), grid.spot) for i, t in enumerate(maturities)]
    if len(maturities) != len(model.maturities) or not np.allclose(maturities, model.maturities):
        raise InvalidInputError(f"model maturities {model.maturities} do not match the quotes {maturities}")
    slices = eval_option_groups(
        model, sabr, groups, config.calib.eval_paths, rng.derive_seed(config.seed, rng.TAG_EVAL), config.calib
    )
    rows = [
        (s.maturity, float(k), float(p), float(iv), float(se), float(vr))
        for s in slices
        for k, p, iv, se, vr in zip(s.strikes, s.call_prices, s.ivs, s.price_std_errs, s.variance_reduction)
    ]
    out = args.out or Path("prices.csv")
    report_io.write_price_csv(rows, out)
    for s in slices:
        atm = int(np.argmin(np.abs(s.strikes - sabr.s0)))
        _say(
            args,
            f"  T={s.maturity}: ATM IV {s.ivs[atm]:.4f}, variance reduction x{s.variance_reduction[atm]:.1f}",
        )
    if args.leverage_out is not None:
        times = np.arange(0.0, model.horizon - 1e-12, config.calib.dt)
        log_spots = np.linspace(-1.0, 1.0, 81)
        report_io.write_leverage_csv(times, log_spots, leverage_table(model, times, log_spots), args.leverage_out)
        _say(args, f"Wrote leverage grid to {args.leverage_out}")
    _say(args, f"Wrote prices to {out}")


def _extrapolate(args: argparse.Namespace, config: RunConfig, locale_helper: LocaleHelper) -> None:
    model_dir = _require(args.model, "--model")
    model = LeverageModel.load(model_dir)
    sabr = report_io.load_sabr(model_dir)
    xi = report_io.load_xi(_require(args.xi, "--xi"))
    out = args.out or Path("extrapolation.csv")
    report = extrapolation_report(model, sabr, xi, config, config.seed, out=out)
    for entry in report.per_maturity:
        mean = entry["mean_error"]
        _say(
            args,
            f"  T={entry['maturity']}: mean error "
            f"{locale_helper.format_iv_error(mean) if mean is not None else 'n/a'}, {entry['flagged']} flagged",
        )
    _say(args, f"Wrote extrapolation table to {out}")


_HANDLERS = {
    "gen-market": _gen_market,
    "calibrate": _calibrate,
    "robust": _robust,
    "stat-test": _stat_test,
    "price": _price,
    "extrapolate": _extrapolate,
}


if __name__ == "__main__":
    main()
