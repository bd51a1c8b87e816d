"""Calibration of the SABR-LSV leverage function to implied-volatility smiles.

Slices are calibrated one maturity at a time. For slice i only the network
theta_i is trained; earlier networks stay frozen. Each training step
simulates a fresh batch of paths, forms the hedged residuals

    X_j = payoff_j - I_j - price_j

and moves theta_i along the modified gradient sum_j w_j l'(mean X_j) d mean(payoff_j),
where the hedge integral I_j contributes to the forward value only.
Model implied vols are checked at fixed intervals against the tolerance,
and strike weights are shifted towards the worst-fitted strikes in between.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from lsv_calib import mlp, rng, settings
from lsv_calib import tape as ad
from lsv_calib.bs_core import OptionSpec, bs_vega_array, implied_vols
from lsv_calib.exceptions import (
    ConfigError,
    DivergenceError,
    InvalidInputError,
    NonFiniteStateError,
    TapeError,
)
from lsv_calib.hedging_cv import HedgeMode, MomentAccumulator, train_deep_hedge
from lsv_calib.lsv_sim import LeverageModel, PathBatch, SimOptions, simulate_lsv
from lsv_calib.market_data import GridSpec, OptionGroup, SabrParams, SmileGrid, SmileSlice
from lsv_calib.optimizers import AdamState, adam_step, sgd_step
from lsv_calib.tape import Tape, Var

logger = logging.getLogger(__name__)

ESTIMATORS = ("hedged", "product")
OPTIMIZERS = ("adam", "sgd")
# rho is kept off +-1 before the atanh transform
_RHO_LIMIT = 0.999


@dataclass(frozen=True)
class CalibConfig:
    """All constants of the calibration loop, the simulation and the networks."""

    dt: float = 0.01
    tol: float = 0.0045
    path_schedule: tuple[tuple[int, int], ...] = ((1, 400), (500, 2000), (1500, 10000), (4000, 50000))
    max_train_paths: Optional[int] = None
    check_start: int = 5000
    check_every: int = 1000
    max_steps: int = 12000
    learning_rate: float = 1e-3
    eval_paths: int = 1_000_000
    hedge_mode: HedgeMode = HedgeMode.BS_DELTA_RUNNING
    estimator: str = "hedged"
    adversarial: bool = True
    keep_best: bool = True
    log_every: int = 100
    optimizer: str = "adam"
    deep_hedge_iterations: int = 100
    deep_hedge_paths: int = 2000
    deep_hedge_hidden_dims: tuple[int, ...] = (16, 16)
    path_block: int = 2500
    antithetic: bool = False
    workers: int = 1
    clamp_leverage_min: Optional[float] = None
    hidden_dims: tuple[int, ...] = (64, 64, 64, 64)
    hidden_activations: tuple[str, ...] = ("leaky_relu", "leaky_relu", "leaky_relu", "tanh")
    leaky_slope: float = 0.2
    output_init_gain: float = 0.01
    sabr_steps: int = 400
    sabr_paths: int = 2000
    sabr_learning_rate: float = 0.01
    sabr_nu: float = 0.5
    sabr_rho: float = -0.3
    sabr_fallback_nu: float = 1.0
    sabr_fallback_rho: float = -0.5

    def __post_init__(self) -> None:
        schedule = self.path_schedule
        if isinstance(schedule, Mapping):
            schedule = schedule.items()
        schedule = tuple(sorted((int(step), int(n)) for step, n in schedule))
        object.__setattr__(self, "path_schedule", schedule)
        try:
            object.__setattr__(self, "hedge_mode", HedgeMode(self.hedge_mode))
        except ValueError as ex:
            raise ConfigError(f"unknown hedge mode {self.hedge_mode!r}") from ex
        for name in ("hidden_dims", "hidden_activations", "deep_hedge_hidden_dims"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

        if not schedule or schedule[0][0] != 1:
            raise ConfigError("the path schedule must start at step 1")
        counts = [n for _, n in schedule]
        if any(n < 2 for n in counts) or any(b < a for a, b in zip(counts, counts[1:])):
            raise ConfigError("path counts must be >= 2 and non-decreasing")
        if not self.tol > 0.0:
            raise ConfigError(f"tol must be > 0, got {self.tol!r}")
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ConfigError(f"dt must be > 0, got {self.dt!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if min(self.check_start, self.check_every, self.max_steps, self.path_block, self.workers) < 1:
            raise ConfigError("step counts, block size and worker count must be >= 1")
        if self.max_train_paths is not None and self.max_train_paths < 2:
            raise ConfigError("max_train_paths must be >= 2")

    @classmethod
    def from_settings(
        cls, preset: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> "CalibConfig":
        """Configured defaults, then the preset overlay, then `overrides`.

        Keys that are not CalibConfig fields (e.g. run-level settings of a
        preset) are ignored here.
        """
        values: dict[str, Any] = {}
        values.update(settings.CALIBRATION_DEFAULTS)
        values.update(settings.SIMULATION_DEFAULTS)
        values.update(settings.NETWORK_DEFAULTS)
        values.update({f"sabr_{key}": value for key, value in settings.SABR_INIT_DEFAULTS.items()})
        if preset is not None:
            if preset not in settings.PRESETS:
                raise ConfigError(f"unknown preset {preset!r}, choose from {sorted(settings.PRESETS)}")
            values.update(settings.PRESETS[preset])
        values.update(overrides or {})
        known = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})

    def n_paths_at(self, step: int) -> int:
        """Training paths of step `step` (1-based), capped by max_train_paths; even for the product estimator."""
        n = self.path_schedule[0][1]
        for start, count in self.path_schedule:
            if step >= start:
                n = count
        if self.max_train_paths is not None:
            n = min(n, self.max_train_paths)
        if self.estimator == "product" and n % 2:
            n += 1
        return n

    def is_check_step(self, step: int) -> bool:
        if step == self.max_steps:
            return True
        return step >= self.check_start and (step - self.check_start) % self.check_every == 0

    def network_spec(self) -> mlp.MlpSpec:
        return mlp.MlpSpec(1, self.hidden_dims, 1, self.hidden_activations, self.leaky_slope)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["path_schedule"] = {str(step): n for step, n in self.path_schedule}
        data["hedge_mode"] = self.hedge_mode.value
        for name in ("hidden_dims", "hidden_activations", "deep_hedge_hidden_dims"):
            data[name] = list(data[name])
        return data


def normalize_weights(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if np.any(~np.isfinite(raw)) or np.any(raw < 0.0) or raw.sum() <= 0.0:
        raise InvalidInputError("weights must be finite, non-negative and not all zero")
    return raw / raw.sum()


def vega_weights(slice_: SmileSlice, spot: float = 1.0) -> np.ndarray:
    """w_j proportional to 1 / vega_j at the market implied vol; zero for skipped quotes."""
    live = ~slice_.skipped
    vegas = bs_vega_array(spot, slice_.strikes[live], slice_.maturity, slice_.ivs[live])
    if np.any(~np.isfinite(vegas)) or np.any(vegas <= 0.0):
        raise InvalidInputError(f"degenerate option with zero vega at maturity {slice_.maturity}")
    raw = np.zeros(len(slice_.strikes))
    raw[live] = 1.0 / vegas
    return normalize_weights(raw)


def adversarial_update(weights: np.ndarray, errors: np.ndarray) -> np.ndarray:
    """w_j + |err_j|, renormalised."""
    return normalize_weights(np.asarray(weights, dtype=float) + np.abs(errors))


@dataclass
class Objective:
    """Loss value, per-strike mean residuals and d(loss)/d(payoff) per path, shape (n, J)."""

    loss: float
    means: np.ndarray
    cotangent: np.ndarray
    attained: Optional[np.ndarray] = None


def _residuals(payoffs, integrals, targets, c: float) -> np.ndarray:
    payoffs = np.asarray(payoffs, dtype=float)
    integrals = np.asarray(integrals, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if payoffs.ndim != 2 or integrals.shape != payoffs.shape or targets.shape[-1] != payoffs.shape[1]:
        raise InvalidInputError(
            f"mismatched strike count: payoffs {payoffs.shape}, integrals {integrals.shape}, targets {targets.shape}"
        )
    return payoffs - c * integrals - targets


def _check_weights(weights, n_strikes: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n_strikes,):
        raise InvalidInputError(f"mismatched strike count: {weights.shape} weights for {n_strikes} strikes")
    return weights


def calib_objective(payoffs, integrals, targets, weights, c: float = 1.0) -> Objective:
    """sum_j w_j (mean_n X_j)^2 with X_j = payoff_j - c I_j - target_j."""
    residuals = _residuals(payoffs, integrals, targets, c)
    n, n_strikes = residuals.shape
    weights = _check_weights(weights, n_strikes)
    means = residuals.mean(axis=0)
    loss = float(np.sum(weights * means * means))
    cotangent = np.broadcast_to(2.0 * weights * means / n, residuals.shape).copy()
    return Objective(loss, means, cotangent)


def robust_objective(payoffs, integrals, target_sets, weights, c: float = 1.0) -> Objective:
    """sum_j w_j max_m (mean_n X_{j,m})^2 over M target price sets of shape (M, J).

    The gradient flows through the attaining index m of every strike.
    """
    target_sets = np.atleast_2d(np.asarray(target_sets, dtype=float))
    base = _residuals(payoffs, integrals, np.zeros(target_sets.shape[1]), c)
    n, n_strikes = base.shape
    weights = _check_weights(weights, n_strikes)
    means = base.mean(axis=0)[None, :] - target_sets
    attained = np.argmax(means * means, axis=0)
    worst = means[attained, np.arange(n_strikes)]
    loss = float(np.sum(weights * worst * worst))
    cotangent = np.broadcast_to(2.0 * weights * worst / n, base.shape).copy()
    return Objective(loss, worst, cotangent, attained)


def product_form_objective(payoffs, integrals, targets, weights, c: float = 1.0) -> Objective:
    """(1/N) sum_n sum_j w_j X_j(omega_n) X_j(omega_{n+N}) over 2N paths.

    Unbiased for sum_j w_j E[X_j]^2, so its gradient is an unbiased stochastic gradient.
    """
    residuals = _residuals(payoffs, integrals, targets, c)
    total, n_strikes = residuals.shape
    if total % 2:
        raise InvalidInputError(f"the product-form estimator needs an even path count, got {total}")
    weights = _check_weights(weights, n_strikes)
    half = total // 2
    first, second = residuals[:half], residuals[half:]
    loss = float(np.sum(weights * first * second) / half)
    cotangent = np.concatenate([weights * second, weights * first]) / half
    return Objective(loss, residuals.mean(axis=0), cotangent)


def tape_gradient(
    paths: PathBatch, maturity: float, cotangent: np.ndarray, params: mlp.MlpParams, c: float = 1.0
) -> np.ndarray:
    """Backpropagate `cotangent` from payoff - c * hedge integral to the flat parameters of `params`.

    Hedge integrals simulated as stop-gradient leaves contribute nothing.

    Raises:
        TapeError: the batch was simulated without a tape.
    """
    if paths.tape is None:
        raise TapeError("path batch was simulated without a tape")
    node = ad.sub(paths.payoffs(maturity), ad.mul(c, paths.hedge_integrals[maturity]))
    if not isinstance(node, Var) or node.index is None:
        raise TapeError("payoffs were not recorded on the tape")
    grads = ad.backprop(paths.tape, node, seed=cotangent)
    return mlp.params_gradient(grads, paths.tape, params)


ObjectiveFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], Objective]


def _objective_fn(config: CalibConfig, n_target_sets: int) -> ObjectiveFn:
    if n_target_sets > 1:
        return robust_objective
    if config.estimator == "product":
        return lambda p, i, t, w: product_form_objective(p, i, t[0], w)
    return lambda p, i, t, w: calib_objective(p, i, t[0], w)


def sim_options(
    config: CalibConfig,
    groups: Sequence[OptionGroup],
    neural_hedges: Optional[Mapping[float, tuple[mlp.MlpParams, ...]]] = None,
    **kwargs,
) -> SimOptions:
    mode = config.hedge_mode
    if mode is HedgeMode.NEURAL and not neural_hedges:
        mode = HedgeMode.BS_DELTA_RUNNING
    return SimOptions(
        hedge_mode=mode,
        option_groups=tuple(groups),
        neural_hedges=dict(neural_hedges or {}),
        antithetic=config.antithetic,
        block_size=config.path_block,
        workers=config.workers,
        **kwargs,
    )


def _batch_values(paths: PathBatch, maturity: float) -> tuple[np.ndarray, np.ndarray]:
    return ad.value_of(paths.payoffs(maturity)), ad.value_of(paths.hedge_integrals[maturity])


def calib_gradient(
    model: LeverageModel,
    i: int,
    sabr: SabrParams,
    group: OptionGroup,
    target_sets: np.ndarray,
    weights: np.ndarray,
    n_paths: int,
    seed: int,
    config: CalibConfig,
    neural_hedges: Optional[Mapping[float, tuple[mlp.MlpParams, ...]]] = None,
) -> tuple[np.ndarray, Objective]:
    """Objective and modified gradient w.r.t. theta_i on one fresh batch.

    A batch that fits into one RNG block is simulated once on a tape. Larger
    batches are first simulated without a tape to get the residual means,
    then block by block on a tape, and the block gradients are summed in
    block order.
    """
    target_sets = np.atleast_2d(target_sets)
    evaluate = _objective_fn(config, target_sets.shape[0])
    options = sim_options(config, [group], neural_hedges)
    maturity, params = group.maturity, model.params[i]
    blocks = rng.path_blocks(n_paths, config.path_block)

    if len(blocks) == 1:
        tape = Tape()
        paths = simulate_lsv(sabr, model, maturity, n_paths, config.dt, seed, options, tape=tape, trainable_index=i)
        objective = evaluate(*_batch_values(paths, maturity), target_sets, weights)
        return tape_gradient(paths, maturity, objective.cotangent, params), objective

    paths = simulate_lsv(sabr, model, maturity, n_paths, config.dt, seed, options)
    objective = evaluate(*_batch_values(paths, maturity), target_sets, weights)
    grad = np.zeros(params.spec.parameter_count())
    for block in blocks:
        tape = Tape()
        part = simulate_lsv(
            sabr, model, maturity, n_paths, config.dt, seed, options, tape=tape, trainable_index=i, blocks=[block]
        )
        rows = objective.cotangent[block.start : block.start + block.count]
        grad = grad + tape_gradient(part, maturity, rows, params)
    return grad, objective


@dataclass
class ModelSlice:
    """Model prices and implied vols of one maturity, with Monte Carlo standard errors."""

    maturity: float
    strikes: np.ndarray
    call_prices: np.ndarray
    price_std_errs: np.ndarray
    ivs: np.ndarray
    iv_std_errs: np.ndarray
    skipped: np.ndarray
    variance_reduction: np.ndarray
    c_opt: np.ndarray


def eval_option_groups(
    model: Optional[LeverageModel],
    sabr: SabrParams,
    groups: Sequence[OptionGroup],
    n_paths: int,
    seed: int,
    config: CalibConfig,
    neural_hedges: Optional[Mapping[float, tuple[mlp.MlpParams, ...]]] = None,
) -> list[ModelSlice]:
    """Control-variate prices (optimal coefficient) of the groups' options, as call prices and implied vols.

    IV standard errors are price standard errors divided by vega.
    """
    options = sim_options(config, groups, neural_hedges)
    horizon = max(g.maturity for g in groups)

    def run(block: rng.PathBlock) -> dict[float, MomentAccumulator]:
        paths = simulate_lsv(sabr, model, horizon, n_paths, config.dt, seed, options, blocks=[block])
        accumulators = {}
        for group in groups:
            acc = MomentAccumulator()
            acc.add(*_batch_values(paths, group.maturity))
            accumulators[group.maturity] = acc
        return accumulators

    totals = {g.maturity: MomentAccumulator() for g in groups}
    for partial in rng.map_ordered(run, rng.path_blocks(n_paths, config.path_block), config.workers):
        for maturity, acc in partial.items():
            totals[maturity].merge(acc)

    slices = []
    for group in groups:
        stats = totals[group.maturity].stats()
        prices = np.asarray(stats.hedged_mean, dtype=float)
        calls = np.where(group.is_call, prices, prices + sabr.s0 - group.strikes)
        ivs, skipped = implied_vols(calls, group.strikes, group.maturity, sabr.s0)
        std_errs = np.asarray(stats.hedged_std_err, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            vegas = bs_vega_array(sabr.s0, group.strikes, group.maturity, np.where(skipped, 1.0, ivs))
            iv_std_errs = np.where(skipped, np.nan, std_errs / vegas)
        slices.append(
            ModelSlice(
                maturity=group.maturity,
                strikes=group.strikes,
                call_prices=calls,
                price_std_errs=std_errs,
                ivs=ivs,
                iv_std_errs=iv_std_errs,
                skipped=skipped,
                variance_reduction=np.asarray(stats.variance_reduction, dtype=float),
                c_opt=np.asarray(stats.c_opt, dtype=float),
            )
        )
    return slices


def eval_model_ivs(
    model: Optional[LeverageModel],
    sabr: SabrParams,
    grid: GridSpec,
    n_paths: int,
    seed: int,
    config: CalibConfig,
) -> list[ModelSlice]:
    """Model implied vols on every maturity and strike of `grid`, priced from one path set."""
    groups = [OptionGroup.calibration_set(t, grid.strikes(i), grid.spot) for i, t in enumerate(grid.maturities)]
    return eval_option_groups(model, sabr, groups, n_paths, seed, config)


def iv_errors(model_ivs: np.ndarray, market_iv_sets: np.ndarray) -> np.ndarray:
    """|iv_model - iv_market| for one market; distance to the [min, max] envelope for several."""
    market_iv_sets = np.atleast_2d(market_iv_sets)
    lower, upper = market_iv_sets.min(axis=0), market_iv_sets.max(axis=0)
    return np.maximum(np.maximum(lower - model_ivs, model_ivs - upper), 0.0)


@dataclass
class SabrInitResult:
    sabr: SabrParams
    loss: float
    steps: int
    restarts: int
    wall_time: float


def _atm_iv(slice_: SmileSlice, spot: float) -> float:
    live = ~slice_.skipped
    return float(np.interp(spot, slice_.strikes[live], slice_.ivs[live]))


def _fit_sabr(
    group: OptionGroup,
    targets: np.ndarray,
    weights: np.ndarray,
    start: tuple[float, float, float],
    spot: float,
    config: CalibConfig,
    seed: int,
) -> tuple[SabrParams, float]:
    nu, rho, alpha0 = start
    theta = np.array([math.log(nu), math.atanh(max(-_RHO_LIMIT, min(_RHO_LIMIT, rho))), math.log(alpha0)])
    state = AdamState.zeros(3)
    mode = config.hedge_mode if config.hedge_mode.is_bs_delta else HedgeMode.BS_DELTA_RUNNING
    options = SimOptions(
        hedge_mode=mode,
        option_groups=(group,),
        hedge_on_tape=True,
        antithetic=config.antithetic,
        block_size=config.path_block,
    )
    loss = math.nan
    for step in range(config.sabr_steps):
        batch_seed = rng.derive_seed(seed, step)
        tape = Tape()
        leaves = [tape.leaf(value) for value in theta]
        nu_var, rho_var, alpha_var = ad.exp(leaves[0]), ad.tanh(leaves[1]), ad.exp(leaves[2])
        current = _sabr_from_theta(theta, spot)
        paths = simulate_lsv(
            current,
            None,
            group.maturity,
            config.sabr_paths,
            config.dt,
            batch_seed,
            options,
            tape=tape,
            sabr_leaves=(nu_var, rho_var, alpha_var),
        )
        objective = calib_objective(*_batch_values(paths, group.maturity), targets, weights)
        node = ad.sub(paths.payoffs(group.maturity), paths.hedge_integrals[group.maturity])
        grads = ad.backprop(tape, node, seed=objective.cotangent)
        gradient = np.array([float(grads.wrt(leaf)) for leaf in leaves])
        loss = objective.loss
        if not math.isfinite(loss) or not np.all(np.isfinite(gradient)):
            raise DivergenceError("SABR pre-calibration gradient is not finite", step, batch_seed)
        if config.log_every and step % config.log_every == 0:
            logger.debug("SABR init step %d: loss %.6e, %s", step, loss, current)
        theta, state = adam_step(state, theta, gradient, config.sabr_learning_rate)
    return _sabr_from_theta(theta, spot), loss


def _sabr_from_theta(theta: np.ndarray, spot: float) -> SabrParams:
    return SabrParams(nu=math.exp(theta[0]), rho=math.tanh(theta[1]), alpha0=math.exp(theta[2]), s0=spot)


def calibrate_sabr_init(slice_: SmileSlice, config: CalibConfig, seed: int, spot: float = 1.0) -> SabrInitResult:
    """Fit (nu, rho, alpha0) with L = 1 to one slice by Monte Carlo gradient descent.

    nu, rho and alpha0 are optimised as exp(u), tanh(v) and exp(w). The
    gradient is the full one, with the hedge integral on the tape. A
    diverging fit restarts once from the fallback initial point.

    Raises:
        DivergenceError: both initial points diverged.
    """
    started = time.perf_counter()
    live = ~slice_.skipped
    group = OptionGroup.calibration_set(slice_.maturity, slice_.strikes[live], spot)
    targets = group.target_prices(slice_.prices[live], spot)
    weights = vega_weights(slice_, spot)[live]
    atm_iv = _atm_iv(slice_, spot)
    starts = [
        (config.sabr_nu, config.sabr_rho, atm_iv),
        (config.sabr_fallback_nu, config.sabr_fallback_rho, atm_iv),
    ]
    for attempt, start in enumerate(starts):
        try:
            sabr, loss = _fit_sabr(group, targets, weights, start, spot, config, rng.derive_seed(seed, attempt))
        except (DivergenceError, NonFiniteStateError) as ex:
            logger.warning("SABR pre-calibration diverged from %s: %s", start, ex)
            continue
        logger.info("SABR pre-calibration: %s, loss %.3e", sabr, loss)
        return SabrInitResult(sabr, loss, config.sabr_steps, attempt, time.perf_counter() - started)
    raise DivergenceError("SABR pre-calibration diverged from both initial points", config.sabr_steps, seed)


@dataclass
class SliceReport:
    """Outcome of calibrating one maturity."""

    index: int
    maturity: float
    steps: int = 0
    max_error: float = math.nan
    mean_error: float = math.nan
    wall_time: float = 0.0
    best_step: int = 0
    skipped: bool = False
    skip_reason: Optional[str] = None
    strikes: list[float] = field(default_factory=list)
    iv_market: list[Optional[float]] = field(default_factory=list)
    iv_model: list[Optional[float]] = field(default_factory=list)
    iv_std_err: list[Optional[float]] = field(default_factory=list)
    abs_error: list[Optional[float]] = field(default_factory=list)
    error_history: list[tuple[int, float]] = field(default_factory=list)
    weight_history: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ("max_error", "mean_error"):
            data[key] = _json_float(data[key])
        data["error_history"] = [[step, _json_float(err)] for step, err in self.error_history]
        return data


@dataclass
class CalibReport:
    """Per-slice reports plus the SABR backbone of one surface calibration."""

    seed: int
    config: dict[str, Any]
    sabr: dict[str, float]
    sabr_restarts: int = 0
    sabr_wall_time: float = 0.0
    wall_time: float = 0.0
    eval_coefficient: str = "c_opt"
    slices: list[SliceReport] = field(default_factory=list)

    @property
    def skipped(self) -> bool:
        return any(s.skipped for s in self.slices)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["slices"] = [s.to_dict() for s in self.slices]
        return data


def _json_float(value) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def _json_list(values) -> list[Optional[float]]:
    return [_json_float(v) for v in values]


@dataclass
class SliceResult:
    params: mlp.MlpParams
    report: SliceReport
    weights: np.ndarray


def train_slice_hedges(
    model: LeverageModel,
    i: int,
    sabr: SabrParams,
    group: OptionGroup,
    targets: np.ndarray,
    config: CalibConfig,
    seed: int,
) -> dict[float, tuple[mlp.MlpParams, ...]]:
    """One deep hedge per option of `group`, trained on paths of the current model."""
    spec = mlp.MlpSpec(3, config.deep_hedge_hidden_dims, 1, ("tanh",) * len(config.deep_hedge_hidden_dims))
    options = SimOptions(
        hedge_mode=HedgeMode.NONE,
        record_maturities=(group.maturity,),
        keep_paths=True,
        block_size=config.path_block,
    )

    def source(k: int) -> PathBatch:
        return simulate_lsv(
            sabr, model, group.maturity, config.deep_hedge_paths, config.dt, rng.derive_seed(seed, k), options
        )

    nets = []
    for j, (strike, is_call, price) in enumerate(zip(group.strikes, group.is_call, targets)):
        opt = OptionSpec(sabr.s0, float(strike), group.maturity, bool(is_call))
        result = train_deep_hedge(
            source,
            opt,
            float(price),
            spec,
            iterations=config.deep_hedge_iterations,
            seed=rng.derive_seed(seed, rng.TAG_INIT, j),
            learning_rate=config.learning_rate,
        )
        nets.append(result.params)
    logger.info("Trained %d deep hedges for slice %d", len(nets), i + 1)
    return {group.maturity: tuple(nets)}


def calibrate_slice(
    i: int,
    market: SmileGrid,
    model: LeverageModel,
    sabr: SabrParams,
    config: CalibConfig,
    seed: int,
    robust_markets: Optional[Sequence[SmileGrid]] = None,
) -> SliceResult:
    """Train theta_i against slice i of `market` (or against all `robust_markets` at once).

    Raises:
        DivergenceError: the objective or its gradient became non-finite.
    """
    started = time.perf_counter()
    slice_ = market.slices[i]
    spot = market.spot
    targets_from = list(robust_markets) if robust_markets else [market]
    report = SliceReport(index=i, maturity=slice_.maturity, strikes=slice_.strikes.tolist())
    report.iv_market = _json_list(slice_.ivs)

    live = ~np.any([m.slices[i].skipped for m in targets_from + [market]], axis=0)
    params = model.params[i]
    if not live.any():
        report.skipped, report.skip_reason = True, "no invertible market quotes"
        logger.warning("Skipping slice %d: %s", i + 1, report.skip_reason)
        return SliceResult(params, report, np.zeros(0))

    group = OptionGroup.calibration_set(slice_.maturity, slice_.strikes[live], spot)
    target_sets = np.stack([group.target_prices(m.slices[i].prices[live], spot) for m in targets_from])
    market_iv_sets = np.stack([m.slices[i].ivs[live] for m in targets_from])
    weights = normalize_weights(vega_weights(slice_, spot)[live])
    report.weight_history.append(weights.tolist())
    neural_hedges = None
    if config.hedge_mode is HedgeMode.NEURAL:
        neural_hedges = train_slice_hedges(
            model, i, sabr, group, target_sets[0], config, rng.derive_seed(seed, rng.TAG_HEDGE, i)
        )

    spec = params.spec
    vector = params.to_vector()
    state = AdamState.zeros(vector.size)
    best_error, best_vector, best_eval = math.inf, vector, None
    last_n = 0
    logger.info("Calibrating slice %d (T=%s, %d strikes)", i + 1, slice_.maturity, int(live.sum()))
    for step in range(1, config.max_steps + 1):
        n_paths = config.n_paths_at(step)
        if n_paths != last_n:
            logger.info("Slice %d: %d training paths from step %d", i + 1, n_paths, step)
            last_n = n_paths
        batch_seed = rng.derive_seed(seed, rng.TAG_TRAIN, i, step)
        current = model.with_params(i, mlp.MlpParams.from_vector(spec, vector))
        try:
            grad, objective = calib_gradient(
                current, i, sabr, group, target_sets, weights, n_paths, batch_seed, config, neural_hedges
            )
        except NonFiniteStateError as ex:
            raise DivergenceError(f"simulation diverged: {ex.message}", step, batch_seed) from ex
        if not math.isfinite(objective.loss) or not np.all(np.isfinite(grad)):
            logger.error("Slice %d diverged at step %d, batch seed %d", i + 1, step, batch_seed)
            raise DivergenceError("calibration loss or gradient is not finite", step, batch_seed)
        if config.optimizer == "sgd":
            vector = sgd_step(vector, grad, config.learning_rate)
        else:
            vector, state = adam_step(state, vector, grad, config.learning_rate)
        if config.log_every and step % config.log_every == 0:
            logger.debug("slice %d step %d: loss %.6e", i + 1, step, objective.loss)
        report.steps = step

        if not config.is_check_step(step):
            continue
        evaluated = current.with_params(i, mlp.MlpParams.from_vector(spec, vector))
        model_slice = eval_option_groups(
            evaluated, sabr, [group], config.eval_paths, rng.derive_seed(seed, rng.TAG_EVAL, i, step), config,
            neural_hedges,
        )[0]
        if model_slice.skipped.any():
            report.skipped = True
            report.skip_reason = f"model implied vol inversion failed at step {step}"
            logger.warning("Skipping slice %d: %s", i + 1, report.skip_reason)
            break
        errors = iv_errors(model_slice.ivs, market_iv_sets)
        error = float(errors.max())
        report.error_history.append((step, error))
        logger.info("Slice %d step %d: max IV error %.2f bp", i + 1, step, error * 1e4)
        if error < best_error or not config.keep_best:
            best_error, best_vector, best_eval = error, vector, (model_slice, errors, step)
        if error <= config.tol:
            break
        if config.adversarial:
            weights = adversarial_update(weights, errors)
            report.weight_history.append(weights.tolist())

    final_vector = best_vector if best_eval is not None else vector
    if best_eval is not None:
        model_slice, errors, best_step = best_eval
        report.best_step = best_step
        report.max_error = float(errors.max())
        report.mean_error = float(errors.mean())
        report.iv_model = _scatter(live, model_slice.ivs)
        report.iv_std_err = _scatter(live, model_slice.iv_std_errs)
        report.abs_error = _scatter(live, errors)
    report.wall_time = time.perf_counter() - started
    return SliceResult(mlp.MlpParams.from_vector(spec, final_vector), report, weights)


def _scatter(mask: np.ndarray, values: np.ndarray) -> list[Optional[float]]:
    full = np.full(mask.shape, np.nan)
    full[mask] = values
    return _json_list(full)


@dataclass
class CalibrationResult:
    model: LeverageModel
    sabr: SabrParams
    report: CalibReport


def calibrate_surface(
    market: SmileGrid,
    config: CalibConfig,
    seed: int,
    robust_markets: Optional[Sequence[SmileGrid]] = None,
    sabr: Optional[SabrParams] = None,
) -> CalibrationResult:
    """SABR pre-calibration on the first slice, then every slice in maturity order.

    A given `sabr` backbone replaces the pre-calibration. Skipped slices keep
    their initial network and the loop continues.
    """
    started = time.perf_counter()
    restarts, sabr_time = 0, 0.0
    if sabr is None:
        reference = robust_markets[0] if robust_markets else market
        sabr_init = calibrate_sabr_init(
            reference.slices[0], config, rng.derive_seed(seed, rng.TAG_SABR), market.spot
        )
        sabr, restarts, sabr_time = sabr_init.sabr, sabr_init.restarts, sabr_init.wall_time
    model = LeverageModel.initial(
        market.maturities,
        config.network_spec(),
        rng.derive_seed(seed, rng.TAG_INIT),
        config.output_init_gain,
        config.clamp_leverage_min,
    )
    report = CalibReport(
        seed=seed,
        config=config.to_dict(),
        sabr=sabr.to_dict(),
        sabr_restarts=restarts,
        sabr_wall_time=sabr_time,
    )
    for i in range(len(market.slices)):
        result = calibrate_slice(i, market, model, sabr, config, seed, robust_markets)
        model = model.with_params(i, result.params)
        report.slices.append(result.report)
    report.wall_time = time.perf_counter() - started
    return CalibrationResult(model, sabr, report)
