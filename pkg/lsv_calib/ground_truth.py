"""Parametric local volatility family and synthetic market smiles.

The ground truth is the local volatility model

    dX = -0.5 a^2(t, X) dt + a(t, X) dW

where a^2 is a mixture-of-lognormals local variance with an extra
short-maturity wing term, clipped to [0, 0.5]. Markets are generated by
Euler simulation of X with a Black-Scholes delta control variate.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import functools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from lsv_calib import rng
from lsv_calib.bs_core import implied_vols
from lsv_calib.exceptions import GridError, InvalidInputError
from lsv_calib.hedging_cv import MIN_HEDGE_VOL, MomentAccumulator, bs_delta_operand
from lsv_calib.lsv_sim import grid_steps
from lsv_calib.market_data import FixedShape, GridSpec, SmileGrid, SmileSlice, XiParams

logger = logging.getLogger(__name__)

# (t, x) -> a^2(t, x), vectorised in x
LocalVarianceFn = Callable[[float, np.ndarray], np.ndarray]

XI_INTERVALS = {
    "p1": (0.4, 0.5),
    "p2": (0.4, 0.7),
    "sigma0": (0.5, 1.7),
    "sigma1": (0.2, 0.4),
    "sigma2": (0.5, 1.7),
}
PERTURBATION_RADIUS = 0.01
HEDGE_VOL_POLICIES = ("running", "frozen")


def local_vol_sq(xi: XiParams, shape: FixedShape, t, x):
    """a^2(t, x) for t > 0; broadcasts over t and x. Values lie in [0, 0.5]."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t <= 0.0):
        raise GridError("local variance needs t > 0; substitute t = dt at the origin")
    if np.any(~np.isfinite(x)):
        raise InvalidInputError("log-moneyness must be finite")

    numerator = np.zeros(np.broadcast(t, x).shape)
    denominator = np.zeros_like(numerator)
    for p, sigma in ((xi.p0, xi.sigma0), (xi.p1, xi.sigma1), (xi.p2, xi.sigma2)):
        k = np.exp(-x * x / (2.0 * t * sigma * sigma) - t * sigma * sigma / 8.0)
        numerator += p * sigma * k
        denominator += (p / sigma) * k

    hinge = shape.gamma1 * np.maximum(x - shape.beta1, 0.0) + shape.gamma2 * np.maximum(-x - shape.beta2, 0.0)
    short_end = np.where(t <= 0.1, 1.0, 0.0) / (1.0 + 0.1 * t)
    wing = short_end**shape.lambda2 * np.minimum(hinge**shape.kappa, shape.lambda1)

    damping = 1.0 - 0.6 * np.where(t > 0.1, 1.0, 0.0)
    ratio = np.abs((numerator + wing) * damping / (denominator + 0.01))
    return 0.25 * np.minimum(2.0, ratio)


def local_variance(xi: XiParams, shape: FixedShape = FixedShape()) -> LocalVarianceFn:
    return functools.partial(local_vol_sq, xi, shape)


def constant_variance(sigma: float) -> LocalVarianceFn:
    """a = sigma everywhere; reduces the ground truth to Black-Scholes."""
    return lambda t, x: np.full(np.shape(x), sigma * sigma)


def sample_xi(seed: int) -> XiParams:
    """Components drawn independently and uniformly from XI_INTERVALS."""
    gen = np.random.default_rng(seed)
    return XiParams(**{name: float(gen.uniform(low, high)) for name, (low, high) in XI_INTERVALS.items()})


def sample_xi_batch(seed: int, count: int) -> dict[str, np.ndarray]:
    """`count` independent draws per component, as arrays."""
    gen = np.random.default_rng(seed)
    return {name: gen.uniform(low, high, size=count) for name, (low, high) in XI_INTERVALS.items()}


def perturb_xi(xi: XiParams, u: float, m: int, seed: int) -> list[XiParams]:
    """`m` copies of xi with independent U[-u, u] noise added to every component."""
    if not (math.isfinite(u) and u >= 0.0) or m < 1:
        raise InvalidInputError(f"need u >= 0 and m >= 1, got {u}, {m}")
    gen = np.random.default_rng(seed)
    base = xi.to_dict()
    perturbed = []
    for _ in range(m):
        noise = gen.uniform(-u, u, size=len(base)) if u > 0.0 else np.zeros(len(base))
        perturbed.append(XiParams(**{name: value + eps for (name, value), eps in zip(base.items(), noise)}))
    return perturbed


@dataclass
class LocalVolBlock:
    """Terminal log-spots per maturity and, per maturity, call payoffs and hedge integrals of shape (n, J)."""

    terminal_log_spot: dict[float, np.ndarray]
    payoffs: dict[float, np.ndarray]
    integrals: dict[float, np.ndarray]


def simulate_local_vol_block(
    variance: LocalVarianceFn,
    strikes: dict[float, np.ndarray],
    block: rng.PathBlock,
    dt: float,
    seed: int,
    spot: float = 1.0,
    hedge_vol: str = "running",
    block_size: int = 2500,
) -> LocalVolBlock:
    """Euler paths of log S for one RNG block, with call-delta hedge integrals at every maturity in `strikes`.

    a^2(0, x) is replaced by a^2(dt, x). The local variance is evaluated on
    log-moneyness log(S / spot).
    """
    if hedge_vol not in HEDGE_VOL_POLICIES:
        raise InvalidInputError(f"hedge_vol must be one of {HEDGE_VOL_POLICIES}, got {hedge_vol!r}")
    maturities = sorted(strikes)
    steps_to = {t: grid_steps(t, dt) for t in maturities}
    n_steps = max(steps_to.values())
    shocks = rng.block_normals(seed, block, block_size, n_steps, 1)
    count, sqrt_dt = block.count, math.sqrt(dt)
    log_spot0 = math.log(spot)
    calls = {t: np.ones(len(strikes[t]), dtype=bool) for t in maturities}

    x = np.full(count, log_spot0)
    integrals = {t: np.zeros((count, len(strikes[t]))) for t in maturities}
    terminal: dict[float, np.ndarray] = {}
    frozen_vol: Optional[np.ndarray] = None
    for k in range(n_steps):
        t = k * dt
        var = variance(t if k > 0 else dt, x - log_spot0)
        vol = np.sqrt(var)
        x_next = x - 0.5 * var * dt + vol * sqrt_dt * shocks[k, 0]
        if frozen_vol is None:
            frozen_vol = vol
        hedge = np.maximum(vol if hedge_vol == "running" else frozen_vol, MIN_HEDGE_VOL)
        increment = (np.exp(x_next) - np.exp(x))[:, None]
        for maturity in maturities:
            if k < steps_to[maturity]:
                delta = bs_delta_operand(x, strikes[maturity], maturity - t, hedge, calls[maturity])
                integrals[maturity] += delta * increment
        x = x_next
        for maturity in maturities:
            if steps_to[maturity] == k + 1:
                terminal[maturity] = x
    payoffs = {t: np.maximum(np.exp(terminal[t])[:, None] - strikes[t], 0.0) for t in maturities}
    return LocalVolBlock(terminal, payoffs, integrals)


def terminal_log_spots(
    variance: LocalVarianceFn,
    maturities: Sequence[float],
    n_paths: int,
    dt: float,
    seed: int,
    spot: float = 1.0,
    block_size: int = 2500,
) -> dict[float, np.ndarray]:
    """Terminal log-spots of the local vol model, all blocks concatenated."""
    strikes = {t: np.array([spot]) for t in maturities}
    blocks = [
        simulate_local_vol_block(variance, strikes, block, dt, seed, spot, block_size=block_size)
        for block in rng.path_blocks(n_paths, block_size)
    ]
    return {t: np.concatenate([b.terminal_log_spot[t] for b in blocks]) for t in maturities}


def gen_synthetic_market(
    xi: Optional[XiParams],
    grid_spec: GridSpec = GridSpec(),
    n_paths: int = 1_000_000,
    dt: float = 0.01,
    seed: int = 0,
    shape: FixedShape = FixedShape(),
    variance: Optional[LocalVarianceFn] = None,
    hedge_vol: str = "running",
    block_size: int = 2500,
    workers: int = 1,
) -> SmileGrid:
    """Call prices and implied vols of the ground-truth model on `grid_spec`.

    Prices use the control variate with the optimal coefficient; every
    strike of every maturity is priced from the same paths. An option whose
    price cannot be inverted to an implied vol is flagged as skipped.
    `variance` overrides the local variance derived from `xi`.
    """
    if variance is None:
        if xi is None:
            raise InvalidInputError("either xi or a local variance function is required")
        variance = local_variance(xi, shape)
    for maturity in grid_spec.maturities:
        grid_steps(maturity, dt)
    strikes = {t: grid_spec.strikes(i) for i, t in enumerate(grid_spec.maturities)}
    spot = grid_spec.spot

    def run(block: rng.PathBlock) -> dict[float, MomentAccumulator]:
        result = simulate_local_vol_block(variance, strikes, block, dt, seed, spot, hedge_vol, block_size)
        accumulators = {}
        for maturity in grid_spec.maturities:
            acc = MomentAccumulator()
            acc.add(result.payoffs[maturity], result.integrals[maturity])
            accumulators[maturity] = acc
        return accumulators

    logger.info("Generating market: %d paths, dt=%s, seed=%d", n_paths, dt, seed)
    totals = {t: MomentAccumulator() for t in grid_spec.maturities}
    for partial in rng.map_ordered(run, rng.path_blocks(n_paths, block_size), workers):
        for maturity, acc in partial.items():
            totals[maturity].merge(acc)

    slices = []
    for maturity in grid_spec.maturities:
        stats = totals[maturity].stats()
        prices = np.asarray(stats.hedged_mean, dtype=float)
        ivs, skipped = implied_vols(prices, strikes[maturity], maturity, spot)
        slices.append(
            SmileSlice(
                maturity=maturity,
                strikes=strikes[maturity],
                prices=prices,
                ivs=ivs,
                std_errs=np.asarray(stats.hedged_std_err, dtype=float),
                skipped=skipped,
            )
        )
    return SmileGrid(slices, spot)

