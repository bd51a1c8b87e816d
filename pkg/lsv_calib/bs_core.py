"""Black-Scholes prices, greeks and implied volatilities at zero interest rate."""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from lsv_calib.exceptions import ConvergenceError, InvalidInputError, OutOfBoundsError

logger = logging.getLogger(__name__)

IV_LOWER = 1e-9
IV_UPPER = 5.0
_PRICE_TOL = 1e-12
# residuals up to this multiple of the tolerance are accepted when Newton stalls
_ACCEPT_FACTOR = 1e3
_MAX_BISECTIONS = 200
_MAX_NEWTON = 50
# bisection hands over to Newton once the bracket is this narrow
_NEWTON_HANDOVER = 1e-3

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class OptionSpec:
    """A European option in discounted terms."""

    spot: float
    strike: float
    ttm: float
    is_call: bool = True

    def __post_init__(self) -> None:
        for name in ("spot", "strike", "ttm"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise InvalidInputError(f"{name} must be finite and > 0, got {value!r}")

    def intrinsic(self) -> float:
        if self.is_call:
            return max(self.spot - self.strike, 0.0)
        return max(self.strike - self.spot, 0.0)

    def upper_bound(self) -> float:
        return self.spot if self.is_call else self.strike


@dataclass(frozen=True)
class BsGreeks:
    price: float
    delta: float
    vega: float


def norm_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def _d1(spot, strike, ttm, vol):
    total_vol = vol * np.sqrt(ttm)
    return (np.log(spot / strike) + 0.5 * total_vol * total_vol) / total_vol


def bs_price_array(spot, strike, ttm, vol, is_call=True):
    """Vectorised Black-Scholes price; broadcasts over all arguments.

    Zero total volatility returns the intrinsic value.
    """
    spot, strike, ttm, vol = np.broadcast_arrays(
        np.asarray(spot, dtype=float),
        np.asarray(strike, dtype=float),
        np.asarray(ttm, dtype=float),
        np.asarray(vol, dtype=float),
    )
    is_call = np.broadcast_to(np.asarray(is_call, dtype=bool), spot.shape)
    total_vol = vol * np.sqrt(ttm)
    live = total_vol > 0.0
    safe_total = np.where(live, total_vol, 1.0)
    d1 = (np.log(spot / strike) + 0.5 * safe_total * safe_total) / safe_total
    d2 = d1 - safe_total
    call = spot * ndtr(d1) - strike * ndtr(d2)
    call = np.where(live, call, np.maximum(spot - strike, 0.0))
    put = strike * ndtr(-d2) - spot * ndtr(-d1)
    put = np.where(live, put, np.maximum(strike - spot, 0.0))
    return np.where(is_call, call, put)


def bs_delta_array(spot, strike, ttm, vol, is_call=True):
    """Vectorised Black-Scholes delta. Requires vol * sqrt(ttm) > 0."""
    delta = ndtr(_d1(spot, strike, ttm, vol))
    return np.where(is_call, delta, delta - 1.0)


def bs_vega_array(spot, strike, ttm, vol):
    return spot * norm_pdf(_d1(spot, strike, ttm, vol)) * np.sqrt(ttm)


def _check_vol(vol: float, strictly_positive: bool = False) -> None:
    if not math.isfinite(vol) or vol < 0.0 or (strictly_positive and vol == 0.0):
        raise InvalidInputError(f"invalid volatility {vol!r}")


def bs_price(opt: OptionSpec, vol: float) -> float:
    """Black-Scholes price of `opt` at volatility `vol`."""
    _check_vol(vol)
    return float(bs_price_array(opt.spot, opt.strike, opt.ttm, vol, opt.is_call))


def bs_greeks(opt: OptionSpec, vol: float) -> BsGreeks:
    """Price, delta and vega, all analytically exact."""
    _check_vol(vol, strictly_positive=True)
    return BsGreeks(
        price=bs_price(opt, vol),
        delta=float(bs_delta_array(opt.spot, opt.strike, opt.ttm, vol, opt.is_call)),
        vega=float(bs_vega_array(opt.spot, opt.strike, opt.ttm, vol)),
    )


def implied_vol(price: float, opt: OptionSpec) -> float:
    """Invert the Black-Scholes formula.

    Bisection on [IV_LOWER, IV_UPPER] narrows the bracket, Newton steps using
    vega then refine. A Newton step that leaves the current bracket is
    replaced by a bisection step.

    Raises:
        OutOfBoundsError: `price` is not strictly inside the no-arbitrage bounds
            or outside the prices reachable from the bracket.
        ConvergenceError: the best residual stays above the acceptance threshold.
    """
    if not math.isfinite(price):
        raise InvalidInputError(f"price must be finite, got {price!r}")
    lower, upper = opt.intrinsic(), opt.upper_bound()
    if not lower < price < upper:
        raise OutOfBoundsError(price, lower, upper)

    low, high = IV_LOWER, IV_UPPER
    if not bs_price(opt, low) <= price <= bs_price(opt, high):
        raise OutOfBoundsError(price, bs_price(opt, low), bs_price(opt, high))

    tolerance = _PRICE_TOL * opt.spot
    vol = 0.5 * (low + high)
    for _ in range(_MAX_BISECTIONS):
        vol = 0.5 * (low + high)
        diff = bs_price(opt, vol) - price
        if abs(diff) <= tolerance:
            return vol
        if diff > 0.0:
            high = vol
        else:
            low = vol
        if high - low < _NEWTON_HANDOVER:
            break

    best_vol, best_diff = vol, math.inf
    for _ in range(_MAX_NEWTON):
        greeks = bs_greeks(opt, vol)
        diff = greeks.price - price
        if abs(diff) < best_diff:
            best_vol, best_diff = vol, abs(diff)
        if abs(diff) <= tolerance:
            return vol
        if diff > 0.0:
            high = min(high, vol)
        else:
            low = max(low, vol)
        step_vol = vol - diff / greeks.vega if greeks.vega > 0.0 else math.nan
        if not low < step_vol < high:
            step_vol = 0.5 * (low + high)
        if step_vol == vol:
            break
        vol = step_vol

    if best_diff > _ACCEPT_FACTOR * tolerance:
        logger.warning("IV inversion failed at residual %.3e for strike %s ttm %s", best_diff, opt.strike, opt.ttm)
        raise ConvergenceError(best_diff)
    logger.debug("IV inversion stopped at residual %.3e for strike %s ttm %s", best_diff, opt.strike, opt.ttm)
    return best_vol


def implied_vol_from_call(call_price: float, spot: float, strike: float, ttm: float) -> float:
    """Implied vol of a call price, inverted on the out-of-the-money side.

    Below the spot the call price is converted to the put price by parity,
    which keeps the inversion well conditioned for in-the-money calls.
    """
    if strike < spot:
        return implied_vol(call_price - spot + strike, OptionSpec(spot, strike, ttm, is_call=False))
    return implied_vol(call_price, OptionSpec(spot, strike, ttm, is_call=True))


def implied_vols(call_prices, strikes, ttm: float, spot: float) -> tuple[np.ndarray, np.ndarray]:
    """Implied vols of call prices per strike, with NaN and a skip flag where inversion fails."""
    strikes = np.asarray(strikes, dtype=float)
    ivs = np.full(len(strikes), np.nan)
    skipped = np.zeros(len(strikes), dtype=bool)
    for j, (price, strike) in enumerate(zip(np.asarray(call_prices, dtype=float), strikes)):
        try:
            ivs[j] = implied_vol_from_call(float(price), spot, float(strike), ttm)
        except (OutOfBoundsError, ConvergenceError, InvalidInputError) as ex:
            logger.warning("No implied vol for strike %s at maturity %s: %s", strike, ttm, ex)
            skipped[j] = True
    return ivs, skipped
