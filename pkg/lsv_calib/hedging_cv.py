"""Hedge-based control variates.

A hedging strategy h gives the stochastic integral I = sum_k h(t_k) (S_{k+1} - S_k),
which has zero mean under the pricing measure. Subtracting c * I from the
payoff leaves the Monte Carlo estimator unbiased and, for c = Cov(P, I) / Var(I),
reduces its variance to (1 - Corr(P, I)^2) Var(P).

Strategies provided here are the Black-Scholes delta evaluated at a running
volatility and a neural strategy trained by quadratic hedging (`train_deep_hedge`).
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from lsv_calib import mlp
from lsv_calib import tape as ad
from lsv_calib.bs_core import OptionSpec
from lsv_calib.exceptions import DivergenceError, GridError, InvalidInputError
from lsv_calib.optimizers import AdamState, adam_step
from lsv_calib.tape import Operand, Tape

if TYPE_CHECKING:
    from lsv_calib.lsv_sim import PathBatch

logger = logging.getLogger(__name__)

# hedge vols are floored so a vanishing or negative L * alpha still yields a finite delta
MIN_HEDGE_VOL = 1e-8
HEDGE_INPUT_DIM = 3


class HedgeMode(str, enum.Enum):
    NONE = "none"
    BS_DELTA_RUNNING = "bs-delta-running"
    BS_DELTA_ALPHA = "bs-delta-alpha"
    NEURAL = "neural"

    @property
    def is_bs_delta(self) -> bool:
        return self in (HedgeMode.BS_DELTA_RUNNING, HedgeMode.BS_DELTA_ALPHA)


def hedge_vol(mode: HedgeMode, running_vol: Operand, alpha: Operand) -> Operand:
    """Volatility fed to the BS delta: L * alpha for the running variant, alpha alone otherwise."""
    vol = running_vol if mode is HedgeMode.BS_DELTA_RUNNING else alpha
    return ad.maximum(vol, MIN_HEDGE_VOL)


def bs_delta_operand(log_spot: Operand, strikes: np.ndarray, ttm: float, vol: Operand, is_call: np.ndarray):
    """BS deltas of shape (n, J) for per-path log-spot and vol of shape (n,).

    Works on plain arrays and on tape Vars alike.
    """
    n = np.shape(ad.value_of(log_spot))[0]
    x = ad.reshape(log_spot, (n, 1))
    total_vol = ad.mul(ad.reshape(vol, (n, 1)), math.sqrt(ttm))
    d1 = ad.div(ad.add(ad.sub(x, np.log(strikes)), ad.mul(0.5, ad.square(total_vol))), total_vol)
    return ad.sub(ad.ndtr(d1), np.where(is_call, 0.0, 1.0))


def hedge_features(t: float, log_spot: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Inputs (t, log S, alpha) of a neural hedging strategy."""
    return mlp.stack_rows([np.full(np.shape(log_spot), t), log_spot, alpha])


def neural_position(params: mlp.MlpParams, t: float, log_spot, alpha, tape: Optional[Tape] = None):
    n = np.shape(ad.value_of(log_spot))[0]
    features = hedge_features(t, ad.value_of(log_spot), ad.value_of(alpha))
    return ad.reshape(mlp.mlp_eval(params, features, tape), (n,))


def _steps_to(paths: "PathBatch", maturity: float) -> int:
    steps = int(round(maturity / paths.dt))
    if abs(steps * paths.dt - maturity) > 1e-9 * max(1.0, maturity):
        raise GridError(f"maturity {maturity} is not on the time grid with dt={paths.dt}")
    if paths.log_spot_path is None:
        raise InvalidInputError("path batch was simulated without keep_paths")
    if steps > paths.log_spot_path.shape[0] - 1:
        raise GridError(f"maturity {maturity} is beyond the simulated horizon")
    return steps


def hedge_integral_bs(paths: "PathBatch", opt: OptionSpec, mode: HedgeMode) -> np.ndarray:
    """Per-path integral of the left-point BS delta against the spot increments up to opt.ttm.

    Needs a batch simulated with keep_paths.
    """
    if mode is HedgeMode.NONE:
        return np.zeros(paths.n_paths)
    if not mode.is_bs_delta:
        raise InvalidInputError(f"{mode.value} is not a Black-Scholes delta mode")
    steps = _steps_to(paths, opt.ttm)
    log_spot, alpha, running = paths.log_spot_path, paths.alpha_path, paths.vol_path
    strikes = np.array([opt.strike])
    is_call = np.array([opt.is_call])
    integral = np.zeros(paths.n_paths)
    for k in range(steps):
        vol = hedge_vol(mode, running[k], alpha[k])
        delta = bs_delta_operand(log_spot[k], strikes, opt.ttm - k * paths.dt, vol, is_call)[:, 0]
        integral += delta * (np.exp(log_spot[k + 1]) - np.exp(log_spot[k]))
    return integral


def hedge_integral_neural(paths: "PathBatch", opt: OptionSpec, params: mlp.MlpParams) -> np.ndarray:
    steps = _steps_to(paths, opt.ttm)
    integral = np.zeros(paths.n_paths)
    for k in range(steps):
        position = neural_position(params, k * paths.dt, paths.log_spot_path[k], paths.alpha_path[k])
        integral += position * (np.exp(paths.log_spot_path[k + 1]) - np.exp(paths.log_spot_path[k]))
    return integral


@dataclass
class CvStats:
    """Sample statistics of payoffs P against a control I.

    Fields are floats for 1-d samples and arrays (one entry per option) for 2-d samples.
    """

    n: int
    plain_mean: np.ndarray
    plain_var: np.ndarray
    hedged_mean: np.ndarray
    hedged_var: np.ndarray
    c_opt: np.ndarray
    corr: np.ndarray
    degenerate: np.ndarray

    @property
    def plain_std_err(self):
        return np.sqrt(self.plain_var / self.n)

    @property
    def hedged_std_err(self):
        return np.sqrt(self.hedged_var / self.n)

    @property
    def variance_reduction(self):
        """Var(plain) / Var(hedged); inf for a perfect hedge."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.hedged_var > 0.0, self.plain_var / self.hedged_var, np.inf)


def _scalarize(value):
    return value.item() if isinstance(value, np.ndarray) and value.ndim == 0 else value


def control_variate_stats(payoffs, integrals) -> CvStats:
    """Optimal-coefficient control variate statistics along axis 0.

    A zero-variance control gives c_opt = 0 and sets `degenerate`.
    """
    payoffs = np.asarray(payoffs, dtype=float)
    integrals = np.asarray(integrals, dtype=float)
    if payoffs.shape != integrals.shape:
        raise InvalidInputError(f"shape mismatch: {payoffs.shape} vs {integrals.shape}")
    n = payoffs.shape[0]
    if n < 2:
        raise InvalidInputError("at least two samples are required")
    dp = payoffs - payoffs.mean(axis=0)
    di = integrals - integrals.mean(axis=0)
    plain_var = np.sum(dp * dp, axis=0) / (n - 1)
    control_var = np.sum(di * di, axis=0) / (n - 1)
    cov = np.sum(dp * di, axis=0) / (n - 1)
    degenerate = control_var == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        c_opt = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, control_var))
        denom = np.sqrt(plain_var * control_var)
        corr = np.where(denom > 0.0, cov / np.where(denom > 0.0, denom, 1.0), 0.0)
    hedged = payoffs - c_opt * integrals
    return CvStats(
        n=n,
        plain_mean=_scalarize(payoffs.mean(axis=0)),
        plain_var=_scalarize(plain_var),
        hedged_mean=_scalarize(hedged.mean(axis=0)),
        hedged_var=_scalarize(np.var(hedged, axis=0, ddof=1)),
        c_opt=_scalarize(c_opt),
        corr=_scalarize(corr),
        degenerate=_scalarize(degenerate),
    )


@dataclass
class MomentAccumulator:
    """Running means and co-moments of (payoff, control) per option.

    Blocks are merged pairwise (Chan et al.), so the result depends only on the
    order in which blocks are added.
    """

    n: int = 0
    mean_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean_i: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2_p: np.ndarray = field(default_factory=lambda: np.zeros(0))
    m2_i: np.ndarray = field(default_factory=lambda: np.zeros(0))
    co_pi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def add(self, payoffs: np.ndarray, integrals: np.ndarray) -> None:
        payoffs = np.asarray(payoffs, dtype=float)
        integrals = np.asarray(integrals, dtype=float)
        nb = payoffs.shape[0]
        if nb == 0:
            return
        mean_p, mean_i = payoffs.mean(axis=0), integrals.mean(axis=0)
        dp, di = payoffs - mean_p, integrals - mean_i
        block = MomentAccumulator(
            nb, mean_p, mean_i, np.sum(dp * dp, axis=0), np.sum(di * di, axis=0), np.sum(dp * di, axis=0)
        )
        self.merge(block)

    def merge(self, other: "MomentAccumulator") -> None:
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.mean_p, self.mean_i = other.n, other.mean_p, other.mean_i
            self.m2_p, self.m2_i, self.co_pi = other.m2_p, other.m2_i, other.co_pi
            return
        n = self.n + other.n
        delta_p = other.mean_p - self.mean_p
        delta_i = other.mean_i - self.mean_i
        weight = self.n * other.n / n
        self.mean_p = self.mean_p + delta_p * other.n / n
        self.mean_i = self.mean_i + delta_i * other.n / n
        self.m2_p = self.m2_p + other.m2_p + delta_p * delta_p * weight
        self.m2_i = self.m2_i + other.m2_i + delta_i * delta_i * weight
        self.co_pi = self.co_pi + other.co_pi + delta_p * delta_i * weight
        self.n = n

    def stats(self, c: Optional[float] = None) -> CvStats:
        """Statistics at c_opt, or at the fixed coefficient `c` when given."""
        if self.n < 2:
            raise InvalidInputError("at least two samples are required")
        plain_var = self.m2_p / (self.n - 1)
        control_var = self.m2_i / (self.n - 1)
        cov = self.co_pi / (self.n - 1)
        degenerate = control_var == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            c_opt = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, control_var))
            denom = np.sqrt(plain_var * control_var)
            corr = np.where(denom > 0.0, cov / np.where(denom > 0.0, denom, 1.0), 0.0)
        coef = c_opt if c is None else np.full_like(c_opt, c)
        hedged_var = np.maximum(plain_var - 2.0 * coef * cov + coef * coef * control_var, 0.0)
        return CvStats(
            n=self.n,
            plain_mean=self.mean_p,
            plain_var=plain_var,
            hedged_mean=self.mean_p - coef * self.mean_i,
            hedged_var=hedged_var,
            c_opt=c_opt,
            corr=corr,
            degenerate=degenerate,
        )


@dataclass
class DeepHedgeResult:
    params: mlp.MlpParams
    final_loss: float
    best_loss: float
    best_losses: list[float]


def _payoff(opt: OptionSpec, spot: np.ndarray) -> np.ndarray:
    return np.maximum(spot - opt.strike, 0.0) if opt.is_call else np.maximum(opt.strike - spot, 0.0)


def train_deep_hedge(
    paths_source: Callable[[int], "PathBatch"],
    opt: OptionSpec,
    market_price: float,
    spec: mlp.MlpSpec,
    loss: Callable[[Operand], Operand] = ad.square,
    iterations: int = 200,
    seed: int = 0,
    learning_rate: float = 1e-3,
    init_gain: float = 0.0,
    log_every: int = 50,
) -> DeepHedgeResult:
    """Train a strategy h(t, log S, alpha) minimising mean u(-C + price + (h . S)_T).

    `paths_source(k)` returns the fresh batch of iteration k, simulated with
    keep_paths. The hedge integral is differentiated through on the tape.
    The returned params are those with the lowest batch loss seen, not the
    last iterate.

    Raises:
        DivergenceError: the loss or its gradient became NaN or infinite.
    """
    if spec.input_dim != HEDGE_INPUT_DIM or spec.output_dim != 1:
        raise InvalidInputError("a hedge network maps (t, log S, alpha) to one position")
    params = mlp.mlp_init(spec, seed, output_gain=init_gain)
    state = AdamState.zeros(spec.parameter_count())
    best = math.inf
    best_params = params
    best_losses: list[float] = []
    value = math.nan
    for k in range(iterations):
        batch = paths_source(k)
        steps = _steps_to(batch, opt.ttm)
        tape = Tape()
        spots = np.exp(batch.log_spot_path[: steps + 1])
        integral: Operand = np.zeros(batch.n_paths)
        for j in range(steps):
            position = neural_position(params, j * batch.dt, batch.log_spot_path[j], batch.alpha_path[j], tape)
            integral = ad.add(integral, ad.mul(position, spots[j + 1] - spots[j]))
        pnl = ad.add(integral, market_price - _payoff(opt, spots[steps]))
        objective = ad.mean(loss(pnl))
        value = float(ad.value_of(objective))
        grads = mlp.params_gradient(ad.backprop(tape, objective), tape, params)
        if not math.isfinite(value) or not np.all(np.isfinite(grads)):
            logger.error("Deep hedge diverged at iteration %d (batch seed %s)", k, batch.seed)
            raise DivergenceError("deep hedge loss or gradient is not finite", k, batch.seed)
        if value < best:
            best, best_params = value, params
        best_losses.append(best)
        if log_every and k % log_every == 0:
            logger.debug("deep hedge iteration %d: loss %.6e", k, value)
        vector, state = adam_step(state, params.to_vector(), grads, learning_rate)
        params = mlp.MlpParams.from_vector(spec, vector)
    return DeepHedgeResult(params=best_params, final_loss=value, best_loss=best, best_losses=best_losses)
