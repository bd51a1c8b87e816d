"""Value types shared between market generation, simulation and calibration."""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lsv_calib import settings
from lsv_calib.exceptions import InvalidInputError


@dataclass(frozen=True)
class XiParams:
    """Parameters (p1, p2, sigma0, sigma1, sigma2) of the ground-truth local volatility.

    p0 = 1 - p1 - p2 may be negative.
    """

    p1: float
    p2: float
    sigma0: float
    sigma1: float
    sigma2: float

    def __post_init__(self) -> None:
        for name in ("p1", "p2", "sigma0", "sigma1", "sigma2"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise InvalidInputError(f"{name} must be finite and > 0, got {value!r}")

    @property
    def p0(self) -> float:
        return 1.0 - self.p1 - self.p2

    def to_dict(self) -> dict:
        return {
            "p1": self.p1,
            "p2": self.p2,
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "XiParams":
        return cls(**{key: float(data[key]) for key in ("p1", "p2", "sigma0", "sigma1", "sigma2")})


@dataclass(frozen=True)
class FixedShape:
    """Fixed constants of the ground-truth family."""

    gamma1: float = settings.SHAPE_DEFAULTS["gamma1"]
    gamma2: float = settings.SHAPE_DEFAULTS["gamma2"]
    lambda1: float = settings.SHAPE_DEFAULTS["lambda1"]
    lambda2: float = settings.SHAPE_DEFAULTS["lambda2"]
    beta1: float = settings.SHAPE_DEFAULTS["beta1"]
    beta2: float = settings.SHAPE_DEFAULTS["beta2"]
    kappa: float = settings.SHAPE_DEFAULTS["kappa"]


@dataclass(frozen=True)
class SabrParams:
    """Backbone of the SABR-LSV model: vol-of-vol, correlation, initial vol and spot."""

    nu: float
    rho: float
    alpha0: float
    s0: float = 1.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.nu):
            raise InvalidInputError(f"nu must be finite, got {self.nu!r}")
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidInputError(f"rho must lie in [-1, 1], got {self.rho!r}")
        if not math.isfinite(self.alpha0) or self.alpha0 <= 0.0:
            raise InvalidInputError(f"alpha0 must be > 0, got {self.alpha0!r}")
        if not math.isfinite(self.s0) or self.s0 <= 0.0:
            raise InvalidInputError(f"s0 must be > 0, got {self.s0!r}")

    def to_dict(self) -> dict:
        return {"nu": self.nu, "rho": self.rho, "alpha0": self.alpha0, "s0": self.s0}

    @classmethod
    def from_dict(cls, data: dict) -> "SabrParams":
        return cls(
            nu=float(data["nu"]),
            rho=float(data["rho"]),
            alpha0=float(data["alpha0"]),
            s0=float(data.get("s0", 1.0)),
        )


@dataclass(frozen=True)
class GridSpec:
    """Maturities and strike-range parameters k_i of a smile grid.

    Strikes of maturity i are `strikes_per_maturity` evenly spaced points
    from exp(-k_i) to exp(k_i), times the spot.
    """

    maturities: tuple[float, ...] = settings.MATURITIES
    strike_params: tuple[float, ...] = settings.STRIKE_PARAMS
    strikes_per_maturity: int = settings.STRIKES_PER_MATURITY
    spot: float = 1.0

    def __post_init__(self) -> None:
        if len(self.maturities) != len(self.strike_params) or not self.maturities:
            raise InvalidInputError("one strike parameter per maturity is required")
        if any(b <= a for a, b in zip(self.maturities, self.maturities[1:])) or self.maturities[0] <= 0:
            raise InvalidInputError("maturities must be positive and strictly increasing")
        if self.strikes_per_maturity < 2:
            raise InvalidInputError("at least two strikes per maturity are required")

    def strikes(self, i: int) -> np.ndarray:
        k = self.strike_params[i]
        return self.spot * np.linspace(math.exp(-k), math.exp(k), self.strikes_per_maturity)

    def widened(self, factor: float) -> "GridSpec":
        return GridSpec(
            maturities=self.maturities,
            strike_params=tuple(k * factor for k in self.strike_params),
            strikes_per_maturity=self.strikes_per_maturity,
            spot=self.spot,
        )

    def truncated(self, n_maturities: int) -> "GridSpec":
        return GridSpec(
            maturities=self.maturities[:n_maturities],
            strike_params=self.strike_params[:n_maturities],
            strikes_per_maturity=self.strikes_per_maturity,
            spot=self.spot,
        )


@dataclass
class SmileSlice:
    """Market data of one maturity: call prices, implied vols and their MC standard errors."""

    maturity: float
    strikes: np.ndarray
    prices: np.ndarray
    ivs: np.ndarray
    std_errs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        self.strikes = np.asarray(self.strikes, dtype=float)
        self.prices = np.asarray(self.prices, dtype=float)
        self.ivs = np.asarray(self.ivs, dtype=float)
        n = len(self.strikes)
        if self.std_errs.size == 0:
            self.std_errs = np.zeros(n)
        if self.skipped.size == 0:
            self.skipped = np.zeros(n, dtype=bool)
        if not len(self.prices) == len(self.ivs) == len(self.std_errs) == len(self.skipped) == n:
            raise InvalidInputError("slice arrays must have one entry per strike")
        if n > 1 and np.any(np.diff(self.strikes) <= 0):
            raise InvalidInputError("strikes must be strictly increasing")

    @property
    def has_skips(self) -> bool:
        return bool(np.any(self.skipped))


@dataclass
class SmileGrid:
    """Calibration target: one SmileSlice per maturity, in increasing maturity order."""

    slices: list[SmileSlice]
    spot: float = 1.0

    def __post_init__(self) -> None:
        if not self.slices:
            raise InvalidInputError("a smile grid needs at least one slice")
        maturities = [s.maturity for s in self.slices]
        if any(b <= a for a, b in zip(maturities, maturities[1:])):
            raise InvalidInputError("slices must be ordered by strictly increasing maturity")

    @property
    def maturities(self) -> tuple[float, ...]:
        return tuple(s.maturity for s in self.slices)

    @property
    def has_skips(self) -> bool:
        return any(s.has_skips for s in self.slices)

    def truncated(self, n_maturities: int) -> "SmileGrid":
        return SmileGrid(self.slices[:n_maturities], self.spot)


def put_from_call(call_prices, strikes, spot: float):
    """Put prices by put-call parity at zero rate: P = C - S0 + K."""
    return np.asarray(call_prices, dtype=float) - spot + np.asarray(strikes, dtype=float)


def call_flags(strikes: Sequence[float], spot: float) -> np.ndarray:
    """True (call) for K <= spot, False (put) for K > spot."""
    return np.asarray(strikes, dtype=float) <= spot


def sample_std_err(values: np.ndarray, axis: int = 0) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    return np.std(values, axis=axis, ddof=1) / math.sqrt(n)


@dataclass(frozen=True, eq=False)
class OptionGroup:
    """Vanilla options sharing one maturity; `is_call[j]` picks the payoff of strike j."""

    maturity: float
    strikes: np.ndarray
    is_call: np.ndarray

    def __post_init__(self) -> None:
        strikes = np.asarray(self.strikes, dtype=float)
        is_call = np.broadcast_to(np.asarray(self.is_call, dtype=bool), strikes.shape).copy()
        if strikes.ndim != 1 or strikes.size == 0 or np.any(strikes <= 0.0):
            raise InvalidInputError("strikes must be a non-empty vector of positive values")
        if not math.isfinite(self.maturity) or self.maturity <= 0.0:
            raise InvalidInputError(f"maturity must be > 0, got {self.maturity!r}")
        object.__setattr__(self, "strikes", strikes)
        object.__setattr__(self, "is_call", is_call)

    @classmethod
    def calls(cls, maturity: float, strikes) -> "OptionGroup":
        return cls(maturity, np.asarray(strikes, dtype=float), True)

    @classmethod
    def calibration_set(cls, maturity: float, strikes, spot: float) -> "OptionGroup":
        """Calls for K <= spot, puts above; the instruments the calibration objective is written in."""
        return cls(maturity, np.asarray(strikes, dtype=float), call_flags(strikes, spot))

    def target_prices(self, call_prices, spot: float) -> np.ndarray:
        """Market prices of this group's options from call prices, via put-call parity."""
        call_prices = np.asarray(call_prices, dtype=float)
        return np.where(self.is_call, call_prices, put_from_call(call_prices, self.strikes, spot))
