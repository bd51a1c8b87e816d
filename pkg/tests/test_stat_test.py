# MIT License
#
# Copyright (c) 2024 Dean Thompson

import math
import unittest

import numpy as np
import pytest

from lsv_calib import helpers, report_io, stat_test
from lsv_calib.calibrate import SliceReport
from lsv_calib.exceptions import ConfigError, InvalidInputError
from lsv_calib.lsv_sim import LeverageModel
from lsv_calib.market_data import GridSpec, SabrParams, SmileGrid, SmileSlice
from lsv_calib.stat_test import QUANTILES, RunConfig, RunRecord
from tests.helpers import SMALL_GRID, XI, temp_dir, tiny_config, tiny_spec


def _record(run_id: int, error: float) -> RunRecord:
    return RunRecord(run_id=run_id, seed=run_id, xi=XI.to_dict(), abs_errors=np.full((2, 5), error))


def _smile(ivs) -> SmileGrid:
    ivs = np.asarray(ivs, dtype=float)
    strikes = np.array([0.9, 1.0, 1.1])
    return SmileGrid([SmileSlice(maturity=0.5, strikes=strikes, prices=np.full(3, 0.05), ivs=ivs)])


class TestRunConfig(unittest.TestCase):
    def test_should_layer_file_values_and_overrides(self):
        # when
        config = RunConfig.from_sources(
            file_values={"sample_count": 3, "tol": 0.01, "max_steps": 50},
            overrides={"seed": 7, "jobs": None, "max_steps": 70},
        )
        # then
        self.assertEqual(config.sample_count, 3)
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.jobs, 1)
        self.assertEqual(config.calib.tol, 0.01)
        self.assertEqual(config.calib.max_steps, 70)

    def test_should_apply_preset_named_in_file(self):
        # when
        config = RunConfig.from_sources(file_values={"preset": "smoke"})
        # then
        self.assertEqual(config.preset, "smoke")
        self.assertEqual(config.sample_count, 1)
        self.assertEqual(config.market_paths, 100_000)
        self.assertEqual(config.calib.max_steps, 1200)
        self.assertEqual(config.calib.hidden_dims, (16, 16))

    def test_should_let_file_values_beat_preset(self):
        config = RunConfig.from_sources("smoke", {"sample_count": 4})
        self.assertEqual(config.sample_count, 4)

    def test_should_reject_unknown_keys(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_sources(file_values={"sample_cout": 3})

    def test_should_reject_unknown_preset(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_sources("weekend")

    def test_should_validate_values(self):
        with self.assertRaises(ConfigError):
            RunConfig(n_maturities=len(GridSpec().maturities) + 1)
        with self.assertRaises(ConfigError):
            RunConfig(hedge_vol="implied")
        with self.assertRaises(ConfigError):
            RunConfig(sample_count=0)
        with self.assertRaises(ConfigError):
            RunConfig(extrapolation_factor=0.0)

    def test_should_truncate_grid(self):
        # when
        grid = RunConfig(n_maturities=2).grid()
        # then
        self.assertEqual(grid.maturities, GridSpec().maturities[:2])
        self.assertEqual(RunConfig().grid(), GridSpec())

    def test_should_serialize_calibration_settings(self):
        data = RunConfig(calib=tiny_config()).to_dict()
        self.assertEqual(data["calib"]["max_steps"], 6)
        self.assertEqual(data["sample_count"], 5)

    def test_should_derive_distinct_run_seeds(self):
        seeds = {stat_test.run_seed(11, run_id) for run_id in range(20)}
        self.assertEqual(len(seeds), 20)
        self.assertEqual(stat_test.run_seed(11, 3), stat_test.run_seed(11, 3))


class TestSummarize(unittest.TestCase):
    def test_should_aggregate_completed_runs(self):
        # given
        records = [_record(0, 1.0), _record(1, 2.0), _record(2, 3.0)]
        records.append(RunRecord(run_id=3, seed=3, xi=XI.to_dict(), skipped=True, skip_reason="boom"))
        # when
        summary = stat_test.summarize(records, SMALL_GRID, master_seed=5)
        # then
        self.assertEqual(summary.run_count, 4)
        self.assertEqual(summary.skip_count, 1)
        np.testing.assert_allclose(summary.mean_abs_error, np.full((2, 5), 2.0))
        np.testing.assert_allclose(summary.quantiles[0.15], np.full((2, 5), 1.3))
        np.testing.assert_allclose(summary.quantiles[0.95], np.full((2, 5), 2.9))
        self.assertEqual(list(summary.quantiles), list(QUANTILES))

    def test_should_give_single_run_as_every_quantile(self):
        summary = stat_test.summarize([_record(0, 0.004)], SMALL_GRID, master_seed=0)
        for values in summary.quantiles.values():
            np.testing.assert_allclose(values, np.full((2, 5), 0.004))

    def test_should_fill_nan_when_every_run_skipped(self):
        # given
        records = [RunRecord(run_id=0, seed=0, xi=XI.to_dict(), skipped=True, skip_reason="inversion")]
        # when
        summary = stat_test.summarize(records, SMALL_GRID, master_seed=0)
        data = summary.to_dict()
        # then
        self.assertTrue(np.all(np.isnan(summary.mean_abs_error)))
        self.assertEqual(data["mean_abs_error"], [[None] * 5, [None] * 5])
        self.assertEqual(data["skip_count"], 1)
        self.assertIsNone(data["runs"][0]["max_error"])

    def test_should_produce_schema_valid_summary(self):
        # given
        summary = stat_test.summarize([_record(0, 0.01), _record(1, 0.02)], SMALL_GRID, master_seed=9)
        config = RunConfig(calib=tiny_config())
        out = temp_dir() / "summary.json"
        # when
        document = report_io.write_report(
            {"config": config.to_dict(), "summary": summary.to_dict()}, "stat-test", "stat_summary", out
        )
        # then
        self.assertEqual(helpers.read_json_file(out)["summary"]["run_count"], 2)
        self.assertEqual(document["summary"]["strikes"][0], SMALL_GRID.strikes(0).tolist())


class TestEnvelopeShare(unittest.TestCase):
    def test_should_count_model_ivs_inside_market_range(self):
        # given
        markets = [_smile([0.20, 0.25, 0.30]), _smile([0.22, 0.21, 0.30])]
        slices = [SliceReport(index=0, maturity=0.5, iv_model=[0.21, 0.30, None])]
        # when
        share = stat_test.envelope_share(slices, markets)
        # then
        self.assertEqual(share, 0.5)

    def test_should_ignore_skipped_slices(self):
        # given
        markets = [_smile([0.20, 0.25, 0.30])]
        slices = [SliceReport(index=0, maturity=0.5, skipped=True, skip_reason="diverged")]
        # then
        self.assertTrue(math.isnan(stat_test.envelope_share(slices, markets)))

    def test_should_ignore_strikes_missing_from_a_market(self):
        markets = [_smile([0.20, math.nan, 0.30]), _smile([0.20, 0.25, 0.30])]
        slices = [SliceReport(index=0, maturity=0.5, iv_model=[0.20, 0.25, 0.31])]
        self.assertEqual(stat_test.envelope_share(slices, markets), 0.5)


class TestExtrapolationReport(unittest.TestCase):
    def test_should_reject_model_off_the_grid(self):
        # given
        model = LeverageModel.initial((0.1, 0.2), tiny_spec(), seed=0)
        config = RunConfig(calib=tiny_config(), market_paths=100)
        # then
        with self.assertRaises(InvalidInputError):
            stat_test.extrapolation_report(model, SabrParams(nu=0.5, rho=-0.3, alpha0=0.25), XI, config, seed=1)


@pytest.mark.slow
class TestStudyRuns(unittest.TestCase):
    def config(self, **overrides) -> RunConfig:
        values = {"sample_count": 2, "market_paths": 4000, "n_maturities": 1, "calib": tiny_config()}
        values.update(overrides)
        return RunConfig(**values)

    def test_should_replay_a_run(self):
        # when
        first = stat_test.run_single(1, master_seed=3, config=self.config())
        second = stat_test.run_single(1, master_seed=3, config=self.config())
        # then
        self.assertEqual(first.skipped, second.skipped)
        self.assertEqual(first.xi, second.xi)
        if not first.skipped:
            self.assertEqual(first.abs_errors.shape, (1, GridSpec().strikes_per_maturity))
            np.testing.assert_array_equal(first.abs_errors, second.abs_errors)
            self.assertEqual(len(first.error_rows), GridSpec().strikes_per_maturity)

    def test_should_write_errors_and_summary(self):
        # given
        out = temp_dir()
        # when
        summary = stat_test.run_stat_test(self.config(), out)
        # then
        header, rows = helpers.read_csv_file(out / stat_test.ERRORS_FILE)
        self.assertEqual(tuple(header), report_io.ERRORS_HEADER)
        completed = summary.run_count - summary.skip_count
        self.assertEqual(len(rows), completed * GridSpec().strikes_per_maturity)
        document = helpers.read_json_file(out / stat_test.SUMMARY_FILE)
        self.assertEqual(document["kind"], "stat-test")
        self.assertIn(stat_test.ERRORS_FILE, document["artifacts"])

    def test_should_not_depend_on_jobs(self):
        # when
        serial = stat_test.run_stat_test(self.config(), temp_dir())
        parallel = stat_test.run_stat_test(self.config(jobs=2), temp_dir())
        # then
        np.testing.assert_array_equal(serial.mean_abs_error, parallel.mean_abs_error)
        self.assertEqual([r.seed for r in serial.runs], [r.seed for r in parallel.runs])

    def test_should_calibrate_robustly_to_perturbed_markets(self):
        # when
        result = stat_test.run_robust(XI, self.config(perturbation_count=2), seed=4)
        # then
        self.assertEqual(len(result.markets), 2)
        self.assertTrue(math.isnan(result.envelope_share) or 0.0 <= result.envelope_share <= 1.0)
