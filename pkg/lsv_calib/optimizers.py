"""ADAM and plain SGD updates on flat parameter vectors."""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

from dataclasses import dataclass, replace

import numpy as np

from lsv_calib.exceptions import InvalidInputError


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates and step counter of one ADAM run."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), **kwargs)


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float
) -> tuple[np.ndarray, AdamState]:
    """One ADAM update with bias correction. Returns new (params, state); inputs are not modified."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if not params.shape == grads.shape == state.m.shape:
        raise InvalidInputError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, m=m, v=v, step=step)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """theta - lr * grad."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise InvalidInputError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    return params - lr * grads
