"""SABR-LSV dynamics with a neural leverage function.

In log-price X = log S the model reads

    dX = alpha L(t, X) dW - 0.5 alpha^2 L(t, X)^2 dt,
    d alpha = nu alpha dB,  d<W, B> = rho dt,

with L(t, x) = 1 + F^i(x) on [T_{i-1}, T_i), one network F^i per maturity
interval. X is stepped by Euler, alpha by its exact log-normal solution.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import bisect
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from lsv_calib import helpers, mlp, rng
from lsv_calib import tape as ad
from lsv_calib.exceptions import GridError, InvalidInputError, NonFiniteStateError
from lsv_calib.hedging_cv import HedgeMode, bs_delta_operand, hedge_vol, neural_position
from lsv_calib.market_data import OptionGroup, SabrParams
from lsv_calib.tape import Operand, Tape

logger = logging.getLogger(__name__)

_TIME_TOL = 1e-9
_MODEL_FILE = "leverage_model.json"


def grid_steps(horizon: float, dt: float) -> int:
    """Number of dt steps to `horizon`; raises GridError unless dt divides it."""
    if not (math.isfinite(dt) and dt > 0.0):
        raise GridError(f"dt must be > 0, got {dt!r}")
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > _TIME_TOL * max(1.0, horizon):
        raise GridError(f"dt={dt} does not divide {horizon}")
    return steps


@dataclass(frozen=True)
class LeverageModel:
    """Per-interval networks theta_1..theta_n over the maturities T_1 < ... < T_n."""

    maturities: tuple[float, ...]
    params: tuple[mlp.MlpParams, ...]
    spec: mlp.MlpSpec
    clamp_min: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "maturities", tuple(float(t) for t in self.maturities))
        object.__setattr__(self, "params", tuple(self.params))
        if not self.maturities or len(self.params) != len(self.maturities):
            raise InvalidInputError("one parameter set per maturity is required")
        if self.maturities[0] <= 0 or any(b <= a for a, b in zip(self.maturities, self.maturities[1:])):
            raise InvalidInputError("maturities must be positive and strictly increasing")
        if self.spec.input_dim != 1 or self.spec.output_dim != 1:
            raise InvalidInputError("leverage networks map log S to a scalar")
        if any(p.spec != self.spec for p in self.params):
            raise InvalidInputError("all leverage networks must share the model's spec")

    @classmethod
    def initial(
        cls,
        maturities: Sequence[float],
        spec: mlp.MlpSpec,
        seed: int,
        output_gain: float = 0.01,
        clamp_min: Optional[float] = None,
    ) -> "LeverageModel":
        params = tuple(
            mlp.mlp_init(spec, rng.derive_seed(seed, rng.TAG_INIT, i), output_gain=output_gain)
            for i in range(len(maturities))
        )
        return cls(tuple(maturities), params, spec, clamp_min)

    @property
    def horizon(self) -> float:
        return self.maturities[-1]

    def interval(self, t: float) -> int:
        """0-based index i of the interval [T_{i-1}, T_i) containing t."""
        if t < -_TIME_TOL:
            raise GridError(f"negative time {t}")
        i = bisect.bisect_right(self.maturities, t + _TIME_TOL)
        if i >= len(self.maturities):
            raise GridError(f"t={t} is not before the last maturity {self.horizon}")
        return i

    def with_params(self, i: int, params: mlp.MlpParams) -> "LeverageModel":
        updated = list(self.params)
        updated[i] = params
        return replace(self, params=tuple(updated))

    def save(self, directory: Path) -> list[Path]:
        """Write one parameter file pair per interval plus a JSON index; return all paths."""
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for i, (maturity, params) in enumerate(zip(self.maturities, self.params)):
            stem = directory / f"leverage_{i + 1}"
            mlp.save_params(params, stem, {"maturity": maturity, "interval": i + 1})
            written.extend([stem.with_suffix(".bin"), stem.with_suffix(".json")])
        index = directory / _MODEL_FILE
        helpers.write_json_file(
            {
                "maturities": list(self.maturities),
                "spec": self.spec.to_dict(),
                "clamp_min": self.clamp_min,
                "files": [f"leverage_{i + 1}" for i in range(len(self.maturities))],
            },
            index,
        )
        written.append(index)
        return written

    @classmethod
    def load(cls, directory: Path) -> "LeverageModel":
        index = helpers.read_json_file(directory / _MODEL_FILE)
        if index is None:
            raise FileNotFoundError(directory / _MODEL_FILE)
        params = tuple(mlp.load_params(directory / name)[0] for name in index["files"])
        return cls(
            tuple(index["maturities"]),
            params,
            mlp.MlpSpec.from_dict(index["spec"]),
            index.get("clamp_min"),
        )


def leverage_eval(
    model: LeverageModel,
    t: float,
    x: Operand,
    tape: Optional[Tape] = None,
    trainable_index: Optional[int] = None,
):
    """L(t, x) = 1 + F^i(x) for per-path log-prices x of shape (n,).

    With a tape, the active network's parameters are recorded as leaves
    unless `trainable_index` names a different interval.
    """
    i = model.interval(t)
    if not isinstance(x, ad.Var):
        x = np.atleast_1d(np.asarray(x, dtype=float))
    n = np.shape(ad.value_of(x))[0]
    trainable = tape is not None and (trainable_index is None or trainable_index == i)
    out = mlp.mlp_eval(model.params[i], ad.reshape(x, (n, 1)), tape, trainable=trainable)
    lev = ad.add(1.0, ad.reshape(out, (n,)))
    if model.clamp_min is not None:
        lev = ad.maximum(lev, model.clamp_min)
    return lev


def leverage_table(model: LeverageModel, times: Sequence[float], log_spots: Sequence[float]) -> np.ndarray:
    """L^2 on the grid times x log_spots, shape (len(times), len(log_spots))."""
    x = np.asarray(log_spots, dtype=float)
    return np.stack([np.square(leverage_eval(model, t, x)) for t in times])


def correlated_shocks(z_w: np.ndarray, z_perp: np.ndarray, rho: Operand):
    """zeta_B = rho zeta_W + sqrt(1 - rho^2) zeta_perp."""
    rho_perp = ad.sqrt(ad.sub(1.0, ad.square(rho)))
    return ad.add(ad.mul(rho, z_w), ad.mul(rho_perp, z_perp))


@dataclass(frozen=True)
class SimOptions:
    """What a simulation records besides the terminal state."""

    hedge_mode: HedgeMode = HedgeMode.BS_DELTA_RUNNING
    record_maturities: tuple[float, ...] = ()
    option_groups: tuple[OptionGroup, ...] = ()
    # full (steps + 1, n) grids of log S and alpha, (steps, n) of L * alpha
    keep_paths: bool = False
    # record the hedge integrals on the tape instead of as stop-gradient constants
    hedge_on_tape: bool = False
    # per maturity, one hedge network per strike of the matching option group
    neural_hedges: Mapping[float, tuple[mlp.MlpParams, ...]] = field(default_factory=dict)
    antithetic: bool = False
    block_size: int = 2500
    workers: int = 1


@dataclass
class PathBatch:
    """Simulated paths: terminal states per recorded maturity and hedge integrals per option group.

    With a tape, `terminal_log_spot` values are Vars and `hedge_integrals` are
    stop-gradient leaves (or Vars when simulated with hedge_on_tape).
    """

    seed: int
    dt: float
    n_paths: int
    s0: float
    terminal_log_spot: dict[float, Operand]
    terminal_alpha: dict[float, np.ndarray]
    hedge_integrals: dict[float, Operand]
    option_groups: dict[float, OptionGroup]
    log_spot_path: Optional[np.ndarray] = None
    alpha_path: Optional[np.ndarray] = None
    vol_path: Optional[np.ndarray] = None
    tape: Optional[Tape] = None

    def terminal_spot(self, maturity: float) -> np.ndarray:
        return np.exp(ad.value_of(self.terminal_log_spot[maturity]))

    def payoffs(self, maturity: float):
        """Per-path payoffs of shape (n, J) for the option group at `maturity`."""
        group = self.option_groups[maturity]
        spot = ad.reshape(ad.exp(self.terminal_log_spot[maturity]), (self.n_paths, 1))
        sign = np.where(group.is_call, 1.0, -1.0)
        return ad.relu(ad.mul(ad.sub(spot, group.strikes), sign))


@dataclass
class _BlockResult:
    terminal_log_spot: dict[float, Operand]
    terminal_alpha: dict[float, np.ndarray]
    hedge_integrals: dict[float, Operand]
    log_spot_path: Optional[np.ndarray]
    alpha_path: Optional[np.ndarray]
    vol_path: Optional[np.ndarray]


def _check_finite(values: np.ndarray, step: int, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteStateError(step, what)


def _simulate_block(
    block: rng.PathBlock,
    sabr: SabrParams,
    sabr_leaves: Optional[tuple[Operand, Operand, Operand]],
    model: Optional[LeverageModel],
    n_steps: int,
    dt: float,
    seed: int,
    options: SimOptions,
    record_steps: dict[float, int],
    tape: Optional[Tape],
    trainable_index: Optional[int],
) -> _BlockResult:
    count = block.count
    shocks = rng.block_normals(seed, block, options.block_size, n_steps, 2, options.antithetic)
    nu, rho, alpha0 = sabr_leaves if sabr_leaves is not None else (sabr.nu, sabr.rho, sabr.alpha0)
    sqrt_dt = math.sqrt(dt)
    alpha_drift = ad.mul(-0.5 * dt, ad.square(nu))
    alpha_vol = ad.mul(nu, sqrt_dt)

    x: Operand = np.full(count, math.log(sabr.s0))
    alpha: Operand = ad.mul(alpha0, np.ones(count))
    groups = {g.maturity: g for g in options.option_groups}
    hedges: dict[float, Operand] = {t: np.zeros((count, len(g.strikes))) for t, g in groups.items()}
    hedge_active = options.hedge_mode is not HedgeMode.NONE
    terminal_x: dict[float, Operand] = {}
    terminal_alpha: dict[float, np.ndarray] = {}
    keep = options.keep_paths
    x_grid = np.empty((n_steps + 1, count)) if keep else None
    alpha_grid = np.empty((n_steps + 1, count)) if keep else None
    vol_grid = np.empty((n_steps, count)) if keep else None
    if keep:
        x_grid[0], alpha_grid[0] = ad.value_of(x), ad.value_of(alpha)

    for k in range(n_steps):
        t = k * dt
        lev = 1.0 if model is None else leverage_eval(model, t, x, tape, trainable_index)
        vol = ad.mul(lev, alpha)
        z_w = shocks[k, 0]
        z_b = correlated_shocks(z_w, shocks[k, 1], rho)
        x_next = ad.add(
            ad.sub(x, ad.mul(0.5 * dt, ad.square(vol))),
            ad.mul(ad.mul(vol, sqrt_dt), z_w),
        )
        alpha_next = ad.mul(alpha, ad.exp(ad.add(alpha_drift, ad.mul(alpha_vol, z_b))))
        _check_finite(ad.value_of(x_next), k, "log-spot")
        _check_finite(ad.value_of(alpha_next), k, "volatility")

        if hedge_active:
            on_tape = options.hedge_on_tape
            h_x = x if on_tape else ad.value_of(x)
            h_x_next = x_next if on_tape else ad.value_of(x_next)
            h_vol = vol if on_tape else ad.value_of(vol)
            h_alpha = alpha if on_tape else ad.value_of(alpha)
            increment = ad.reshape(ad.sub(ad.exp(h_x_next), ad.exp(h_x)), (count, 1))
            for maturity, group in groups.items():
                if k >= record_steps[maturity]:
                    continue
                if options.hedge_mode is HedgeMode.NEURAL:
                    nets = options.neural_hedges[maturity]
                    position = np.column_stack(
                        [neural_position(net, t, ad.value_of(h_x), ad.value_of(h_alpha)) for net in nets]
                    )
                else:
                    position = bs_delta_operand(
                        h_x,
                        group.strikes,
                        maturity - t,
                        hedge_vol(options.hedge_mode, h_vol, h_alpha),
                        group.is_call,
                    )
                hedges[maturity] = ad.add(hedges[maturity], ad.mul(position, increment))

        if keep:
            vol_grid[k] = ad.value_of(vol)
            x_grid[k + 1], alpha_grid[k + 1] = ad.value_of(x_next), ad.value_of(alpha_next)
        x, alpha = x_next, alpha_next
        for maturity, steps in record_steps.items():
            if steps == k + 1:
                terminal_x[maturity] = x
                terminal_alpha[maturity] = ad.value_of(alpha)

    return _BlockResult(terminal_x, terminal_alpha, hedges, x_grid, alpha_grid, vol_grid)


def simulate_lsv(
    sabr: SabrParams,
    model: Optional[LeverageModel],
    horizon: float,
    n_paths: int,
    dt: float,
    seed: int,
    options: SimOptions = SimOptions(),
    tape: Optional[Tape] = None,
    trainable_index: Optional[int] = None,
    sabr_leaves: Optional[tuple[Operand, Operand, Operand]] = None,
    blocks: Optional[Sequence[rng.PathBlock]] = None,
) -> PathBatch:
    """Simulate `n_paths` SABR-LSV paths to `horizon`.

    `model=None` means L = 1 (pure SABR). With a tape the whole unrolled
    scheme is recorded so terminal values are differentiable in the
    leverage parameters (and in `sabr_leaves` when given as Vars). Hedge
    integrals enter as stop-gradient leaves unless `options.hedge_on_tape`.
    `blocks` restricts the simulation to a subset of the RNG path blocks;
    path i is the same whatever subset or worker count is used.

    Raises:
        GridError: dt does not divide the horizon or a recorded maturity.
        NonFiniteStateError: the state became NaN or infinite.
    """
    n_steps = grid_steps(horizon, dt)
    maturities = set(options.record_maturities) | {g.maturity for g in options.option_groups}
    record_steps = {t: grid_steps(t, dt) for t in sorted(maturities)}
    if any(steps > n_steps for steps in record_steps.values()):
        raise GridError(f"recorded maturities must not exceed the horizon {horizon}")
    if options.hedge_mode is HedgeMode.NEURAL:
        for group in options.option_groups:
            if len(options.neural_hedges.get(group.maturity, ())) != len(group.strikes):
                raise InvalidInputError(f"need one hedge network per strike at {group.maturity}")
    if blocks is None:
        blocks = rng.path_blocks(n_paths, options.block_size)

    def run(block: rng.PathBlock) -> _BlockResult:
        return _simulate_block(
            block, sabr, sabr_leaves, model, n_steps, dt, seed, options, record_steps, tape, trainable_index
        )

    workers = 1 if tape is not None else options.workers
    results = list(rng.map_ordered(run, list(blocks), workers))
    total = sum(b.count for b in blocks)

    def joined(key: str, maturity: float):
        return ad.concat([getattr(r, key)[maturity] for r in results], axis=0)

    hedges = {t: joined("hedge_integrals", t) for t in record_steps if t in results[0].hedge_integrals}
    if tape is not None and not options.hedge_on_tape:
        hedges = {t: tape.stop_gradient(h) for t, h in hedges.items()}
    keep = options.keep_paths
    return PathBatch(
        seed=seed,
        dt=dt,
        n_paths=total,
        s0=sabr.s0,
        terminal_log_spot={t: joined("terminal_log_spot", t) for t in record_steps},
        terminal_alpha={t: np.concatenate([r.terminal_alpha[t] for r in results]) for t in record_steps},
        hedge_integrals=hedges,
        option_groups={g.maturity: g for g in options.option_groups},
        log_spot_path=np.concatenate([r.log_spot_path for r in results], axis=1) if keep else None,
        alpha_path=np.concatenate([r.alpha_path for r in results], axis=1) if keep else None,
        vol_path=np.concatenate([r.vol_path for r in results], axis=1) if keep else None,
        tape=tape,
    )
