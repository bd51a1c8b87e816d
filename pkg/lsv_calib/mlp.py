"""Small feed-forward networks evaluated on numpy arrays or on a tape."""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from lsv_calib import helpers
from lsv_calib import tape as ad
from lsv_calib.exceptions import InvalidInputError
from lsv_calib.tape import Gradients, Tape, Var

logger = logging.getLogger(__name__)

ACTIVATIONS = ("leaky_relu", "tanh")
_FLOAT_LE = np.dtype("<f8")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a network R^input_dim -> R^output_dim with an affine output layer."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activations: tuple[str, ...]
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "hidden_activations", tuple(self.hidden_activations))
        if len(self.hidden_activations) != len(self.hidden_dims):
            raise InvalidInputError("one activation per hidden layer is required")
        unknown = set(self.hidden_activations) - set(ACTIVATIONS)
        if unknown:
            raise InvalidInputError(f"unknown activations {sorted(unknown)}")
        if not math.isfinite(self.leaky_slope):
            raise InvalidInputError("leaky_slope must be finite")
        if min((self.input_dim, self.output_dim, *self.hidden_dims)) < 1:
            raise InvalidInputError("layer widths must be >= 1")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def activations(self) -> tuple[str, ...]:
        return (*self.hidden_activations, "affine")

    def parameter_count(self) -> int:
        dims = self.layer_dims
        return sum((dims[m - 1] + 1) * dims[m] for m in range(1, len(dims)))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "hidden_activations": list(self.hidden_activations),
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpSpec":
        return cls(
            input_dim=int(data["input_dim"]),
            hidden_dims=tuple(data["hidden_dims"]),
            output_dim=int(data["output_dim"]),
            hidden_activations=tuple(data["hidden_activations"]),
            leaky_slope=float(data.get("leaky_slope", 0.2)),
        )


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights A_m of shape (in, out) and biases b_m of shape (out,), layer by layer."""

    spec: MlpSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise InvalidInputError("layer count does not match spec")
        for m, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[m], dims[m + 1]) or b.shape != (dims[m + 1],):
                raise InvalidInputError(f"layer {m} has shapes {w.shape}, {b.shape}")
            w.setflags(write=False)
            b.setflags(write=False)

    def arrays(self) -> list[np.ndarray]:
        """Interleaved [A_1, b_1, A_2, b_2, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    @classmethod
    def from_vector(cls, spec: MlpSpec, vector: np.ndarray) -> "MlpParams":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (spec.parameter_count(),):
            raise InvalidInputError(
                f"expected {spec.parameter_count()} parameters, got shape {vector.shape}"
            )
        dims = spec.layer_dims
        weights, biases, offset = [], [], 0
        for m in range(1, len(dims)):
            n_w = dims[m - 1] * dims[m]
            weights.append(vector[offset : offset + n_w].reshape(dims[m - 1], dims[m]).copy())
            offset += n_w
            biases.append(vector[offset : offset + dims[m]].copy())
            offset += dims[m]
        return cls(spec, tuple(weights), tuple(biases))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def mlp_init(spec: MlpSpec, seed: int, output_gain: float = 0.01, scale: float = 1.0) -> MlpParams:
    """Zero-mean normal weights with variance scale**2 / fan_in, zero biases.

    The output layer is additionally multiplied by `output_gain` so the initial
    network output is small.
    """
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for m in range(1, len(dims)):
        std = scale / math.sqrt(dims[m - 1])
        if m == len(dims) - 1:
            std *= output_gain
        weights.append(rng.standard_normal((dims[m - 1], dims[m])) * std)
        biases.append(np.zeros(dims[m]))
    return MlpParams(spec, tuple(weights), tuple(biases))


def bind(tape: Tape, params: MlpParams) -> list[Var]:
    """Leaves of `params` on `tape`, in the order of `MlpParams.arrays`."""
    return tape.bind(params, params.arrays())


def mlp_eval(
    params: MlpParams,
    x,
    tape: Optional[Tape] = None,
    trainable: bool = True,
    fused: bool = True,
):
    """Evaluate F(x) = w_M o F_{M-1} o ... o F_1 for a batch x of shape (n, input_dim).

    A 1-d x is one sample. With a tape the parameters are recorded as leaves
    (when trainable) and x may itself be a Var. `fused=False` records the
    same computation with separate matmul/add/activation primitives.
    """
    spec = params.spec
    x_shape = np.shape(ad.value_of(x))
    single = len(x_shape) == 1
    if x_shape[-1] != spec.input_dim:
        raise InvalidInputError(f"input has dimension {x_shape[-1]}, expected {spec.input_dim}")
    h = ad.reshape(x, (1, spec.input_dim)) if single else x

    layers = params.arrays()
    if tape is not None and trainable:
        layers = bind(tape, params)
    for m, activation in enumerate(spec.activations):
        w, b = layers[2 * m], layers[2 * m + 1]
        if fused:
            h = ad.dense(h, w, b, activation, spec.leaky_slope)
        else:
            h = ad.add(ad.matmul(h, w), b)
            if activation == "tanh":
                h = ad.tanh(h)
            elif activation == "leaky_relu":
                h = ad.leaky_relu(h, spec.leaky_slope)
    return ad.reshape(h, (spec.output_dim,)) if single else h


def params_gradient(grads: Gradients, tape: Tape, params: MlpParams) -> np.ndarray:
    """Flat gradient vector w.r.t. `params`, ordered like `MlpParams.to_vector`."""
    return grads.flat(bind(tape, params))


def save_params(params: MlpParams, path: Path, metadata: Optional[dict] = None) -> None:
    """Write `<path>.bin` (little-endian float64) and `<path>.json` (spec + metadata)."""
    bin_path = path.with_suffix(".bin")
    json_path = path.with_suffix(".json")
    logger.info("Writing network parameters: %s", bin_path)
    params.to_vector().astype(_FLOAT_LE).tofile(bin_path)
    sidecar = {"spec": params.spec.to_dict(), "parameter_count": params.spec.parameter_count()}
    if metadata:
        sidecar.update(metadata)
    helpers.write_json_file(sidecar, json_path)


def load_params(path: Path) -> tuple[MlpParams, dict]:
    json_path = path.with_suffix(".json")
    sidecar = helpers.read_json_file(json_path)
    if sidecar is None:
        raise FileNotFoundError(json_path)
    spec = MlpSpec.from_dict(sidecar["spec"])
    vector = np.fromfile(path.with_suffix(".bin"), dtype=_FLOAT_LE).astype(float)
    return MlpParams.from_vector(spec, vector), sidecar


def stack_rows(columns: Sequence) -> np.ndarray:
    """Column-stack 1-d inputs into an (n, d) network input."""
    return np.column_stack([np.asarray(c, dtype=float) for c in columns])
