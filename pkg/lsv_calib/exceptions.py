"""Exceptions raised by lsv-calib."""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

from typing import Optional


class LsvCalibError(Exception):
    """Base class of all errors raised by this package."""

    def __init__(self, message: str = "lsv-calib error"):
        self.message = message
        super().__init__(self.message)


class InvalidInputError(LsvCalibError, ValueError):
    """A numeric argument is non-finite, outside its domain, or has the wrong shape."""


class GridError(InvalidInputError):
    """A time grid is inconsistent, e.g. dt does not divide a maturity."""


class OutOfBoundsError(LsvCalibError, ValueError):
    """An option price violates the no-arbitrage bounds needed for IV inversion."""

    def __init__(self, price: float, lower: float, upper: float):
        self.price = price
        self.lower = lower
        self.upper = upper
        super().__init__(
            f"price {price!r} outside no-arbitrage bounds ({lower!r}, {upper!r})"
        )


class ConvergenceError(LsvCalibError, ValueError):
    """An iterative solver stopped with a residual above its acceptance threshold."""

    def __init__(self, residual: float, what: str = "implied vol inversion"):
        self.residual = residual
        super().__init__(f"{what} did not converge, residual {residual!r}")


class NonFiniteStateError(LsvCalibError):
    """The simulated state became NaN or infinite."""

    def __init__(self, step: int, what: str = "state"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


class TapeError(LsvCalibError):
    """Misuse of the autodiff tape, e.g. differentiating a value that was never recorded."""


class DivergenceError(LsvCalibError):
    """A loss or gradient became NaN or infinite during training."""

    def __init__(self, message: str, step: Optional[int] = None, batch_seed: Optional[int] = None):
        self.step = step
        self.batch_seed = batch_seed
        super().__init__(f"{message} (step={step}, batch_seed={batch_seed})")


class ConfigError(LsvCalibError):
    """Invalid run configuration."""
