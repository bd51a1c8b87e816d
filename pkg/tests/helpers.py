# MIT License
#
# Copyright (c) 2019 Erik Kalkoken
# Copyright (c) 2024 Dean Thompson

import functools
import socket
import tempfile
from pathlib import Path
from unittest import TestCase

from lsv_calib.calibrate import CalibConfig
from lsv_calib.ground_truth import gen_synthetic_market
from lsv_calib.market_data import GridSpec, SmileGrid, XiParams
from lsv_calib.mlp import MlpSpec

XI = XiParams(p1=0.45, p2=0.55, sigma0=1.0, sigma1=0.3, sigma2=1.1)
SMALL_GRID = GridSpec(maturities=(0.15, 0.25), strike_params=(0.1, 0.2), strikes_per_maturity=5)


class SocketAccessError(Exception):
    pass


class NoSocketsTestCase(TestCase):
    """Enhancement of TestCase class that prevents any use of sockets

    Will throw the exception SocketAccessError when any code tries to
    access network sockets
    """

    @classmethod
    def setUpClass(cls):
        cls.socket_original = socket.socket
        socket.socket = cls.guard
        return super().setUpClass()

    @classmethod
    def tearDownClass(cls):
        socket.socket = cls.socket_original
        return super().tearDownClass()

    @staticmethod
    def guard(*args, **kwargs):
        raise SocketAccessError("Attempted to access network")


def temp_dir() -> Path:
    return Path(tempfile.mkdtemp())


def tiny_spec(width: int = 4) -> MlpSpec:
    """A one-hidden-layer leverage network, small enough for finite differences."""
    return MlpSpec(input_dim=1, hidden_dims=(width,), output_dim=1, hidden_activations=("tanh",))


def tiny_config(**overrides) -> CalibConfig:
    """A calibration that finishes in a few seconds."""
    values = {
        "path_schedule": {1: 200},
        "check_start": 2,
        "check_every": 2,
        "max_steps": 6,
        "eval_paths": 2000,
        "hidden_dims": (4,),
        "hidden_activations": ("tanh",),
        "path_block": 500,
        "sabr_steps": 3,
        "sabr_paths": 300,
        "deep_hedge_iterations": 2,
        "deep_hedge_paths": 100,
        "deep_hedge_hidden_dims": (4,),
        "log_every": 0,
    }
    values.update(overrides)
    return CalibConfig(**values)


@functools.lru_cache(maxsize=None)
def small_market(seed: int = 1) -> SmileGrid:
    """Two maturities, five strikes each, from the ground-truth model."""
    return gen_synthetic_market(XI, SMALL_GRID, n_paths=5000, dt=0.01, seed=seed)
