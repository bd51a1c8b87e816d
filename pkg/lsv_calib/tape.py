"""Reverse-mode automatic differentiation over numpy arrays.

A `Tape` records every primitive applied to a `Var` together with the
vector-Jacobian products of its operands. Arrays are treated as batches of
independent scalar computations (one per simulated path), so a path
simulation unrolled over time steps records one node per primitive and step
rather than one per path.

Every primitive in this module also accepts plain floats and numpy arrays.
Without a `Var` operand it returns the plain numpy result, so the same code
evaluates with or without a tape and produces bitwise-identical forward
values either way.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr as _ndtr

from lsv_calib.exceptions import InvalidInputError, TapeError

Vjp = Callable[[np.ndarray], np.ndarray]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Var:
    """A value recorded on a tape.

    `index` is None when the owning tape is not recording; such a Var behaves
    like a constant.
    """

    __slots__ = ("value", "tape", "index")
    # make numpy hand mixed expressions like `array * var` to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, tape: "Tape", index: Optional[int]):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        if exponent != 2:
            raise InvalidInputError("only squaring is supported on the tape")
        return square(self)


Operand = Union[Var, np.ndarray, float]


class Tape:
    """Append-only record of primitives for one scalar (or seeded vector) output.

    Tapes are single-writer objects; use one per worker.
    """

    def __init__(self, enabled: bool = True) -> None:
        self.enabled = enabled
        self._parents: list[tuple[tuple[int, Vjp], ...]] = []
        self._stopped: set[int] = set()
        self._bound: dict[int, tuple[Any, list[Var]]] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, value, stop_gradient: bool = False) -> Var:
        """Register an input variable."""
        value = np.asarray(value, dtype=float)
        if not self.enabled:
            return Var(value, self, None)
        index = len(self._parents)
        self._parents.append(())
        if stop_gradient:
            self._stopped.add(index)
        return Var(value, self, index)

    def stop_gradient(self, x: Operand) -> Var:
        """Same forward value as `x`; nothing flows back through it."""
        return self.leaf(_value(x), stop_gradient=True)

    def bind(self, key: Any, arrays: Sequence[np.ndarray]) -> list[Var]:
        """Leaves for a parameter set, created once per tape and reused on every evaluation."""
        entry = self._bound.get(id(key))
        if entry is not None and entry[0] is key:
            return entry[1]
        leaves = [self.leaf(a) for a in arrays]
        self._bound[id(key)] = (key, leaves)
        return leaves

    def record(self, value: np.ndarray, parents: Sequence[tuple[Operand, Vjp]]) -> Var:
        if not self.enabled:
            return Var(value, self, None)
        links = tuple(
            (p.index, vjp)
            for p, vjp in parents
            if isinstance(p, Var) and p.index is not None and p.tape is self
        )
        index = len(self._parents)
        self._parents.append(links)
        return Var(value, self, index)

    def is_stopped(self, index: int) -> bool:
        return index in self._stopped


@dataclass
class Gradients:
    """Adjoints of every node reached by a backward sweep."""

    tape: Tape
    adjoints: dict[int, np.ndarray] = field(default_factory=dict)

    def wrt(self, var: Var) -> np.ndarray:
        if var.index is None or var.index not in self.adjoints:
            return np.zeros_like(var.value)
        return self.adjoints[var.index]

    def flat(self, variables: Sequence[Var]) -> np.ndarray:
        return np.concatenate([np.ravel(self.wrt(v)) for v in variables])


def backprop(tape: Tape, output: Var, seed: Optional[np.ndarray] = None) -> Gradients:
    """Reverse sweep from `output`.

    Without a seed the output must be a scalar. With a seed of the output's
    shape the sweep computes the vector-Jacobian product seed . d(output).
    Stop-gradient leaves receive exactly zero.
    """
    if not tape.enabled:
        raise TapeError("tape is not recording")
    if not isinstance(output, Var) or output.tape is not tape or output.index is None:
        raise TapeError("output is not on this tape")
    if seed is None:
        if np.size(output.value) != 1:
            raise TapeError(f"output must be scalar without a seed, got shape {output.shape}")
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=float)
    if seed.shape != output.shape:
        raise InvalidInputError(f"seed shape {seed.shape} != output shape {output.shape}")

    grads = Gradients(tape)
    adjoints = grads.adjoints
    adjoints[output.index] = seed
    for index in range(output.index, -1, -1):
        adjoint = adjoints.get(index)
        if adjoint is None or tape.is_stopped(index):
            continue
        for parent, vjp in tape._parents[index]:
            contribution = vjp(adjoint)
            if parent in adjoints:
                adjoints[parent] = adjoints[parent] + contribution
            else:
                adjoints[parent] = contribution
    for index in tape._stopped:
        if index in adjoints:
            adjoints[index] = np.zeros_like(adjoints[index])
    return grads


def _value(x: Operand) -> Any:
    return x.value if isinstance(x, Var) else x


def _tape_of(*operands: Operand) -> Optional[Tape]:
    for x in operands:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while np.ndim(g) > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and np.shape(g)[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return np.reshape(g, shape)


def add(a: Operand, b: Operand):
    av, bv = _value(a), _value(b)
    value = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return value
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
    )


def sub(a: Operand, b: Operand):
    av, bv = _value(a), _value(b)
    value = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return value
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        value,
        [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(-g, sb))],
    )


def mul(a: Operand, b: Operand):
    av, bv = _value(a), _value(b)
    value = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return value
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        value,
        [(a, lambda g: _unbroadcast(g * bv, sa)), (b, lambda g: _unbroadcast(g * av, sb))],
    )


def div(a: Operand, b: Operand):
    av, bv = _value(a), _value(b)
    value = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return value
    sa, sb = np.shape(av), np.shape(bv)
    return tape.record(
        value,
        [
            (a, lambda g: _unbroadcast(g / bv, sa)),
            (b, lambda g: _unbroadcast(-g * value / bv, sb)),
        ],
    )


def neg(a: Operand):
    value = -_value(a)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: -g)])


def square(a: Operand):
    av = _value(a)
    value = av * av
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: 2.0 * av * g)])


def exp(a: Operand):
    value = np.exp(_value(a))
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: g * value)])


def log(a: Operand):
    av = _value(a)
    value = np.log(av)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: g / av)])


def sqrt(a: Operand):
    value = np.sqrt(_value(a))
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: 0.5 * g / value)])


def tanh(a: Operand):
    value = np.tanh(_value(a))
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: g * (1.0 - value * value))])


def leaky_relu(a: Operand, slope: float):
    """Leaky ReLU; the derivative at 0 is taken from the positive branch."""
    av = _value(a)
    positive = av >= 0.0
    value = np.where(positive, av, slope * av)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: np.where(positive, g, slope * g))])


def relu(a: Operand):
    av = _value(a)
    positive = av > 0.0
    value = np.where(positive, av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: np.where(positive, g, 0.0))])


def maximum(a: Operand, floor: float):
    """max(a, floor) for a constant floor."""
    av = _value(a)
    above = av >= floor
    value = np.where(above, av, floor)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: np.where(above, g, 0.0))])


def ndtr(a: Operand):
    """Standard normal CDF."""
    av = _value(a)
    value = _ndtr(av)
    tape = _tape_of(a)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: g * _INV_SQRT_2PI * np.exp(-0.5 * av * av))])


def reshape(a: Operand, shape: tuple[int, ...]):
    av = _value(a)
    value = np.reshape(av, shape)
    tape = _tape_of(a)
    if tape is None:
        return value
    original = np.shape(av)
    return tape.record(value, [(a, lambda g: np.reshape(g, original))])


def rows(a: Operand, start: int, stop: int):
    """a[start:stop] along the first axis."""
    av = _value(a)
    value = av[start:stop]
    tape = _tape_of(a)
    if tape is None:
        return value

    def vjp(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return full

    return tape.record(value, [(a, vjp)])


def total(a: Operand, axis: Optional[int] = None):
    av = _value(a)
    value = np.sum(av, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return value
    shape = np.shape(av)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return tape.record(value, [(a, vjp)])


def mean(a: Operand, axis: Optional[int] = None):
    av = _value(a)
    count = np.size(av) if axis is None else np.shape(av)[axis]
    value = np.sum(av, axis=axis) / count
    tape = _tape_of(a)
    if tape is None:
        return value
    shape = np.shape(av)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, shape).copy()

    return tape.record(value, [(a, vjp)])


def concat(parts: Sequence[Operand], axis: int = 0):
    """Concatenate operands along `axis`."""
    values = [_value(p) for p in parts]
    value = np.concatenate(values, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return value
    bounds = np.cumsum([0] + [np.shape(v)[axis] for v in values])

    def piece(i):
        index = [slice(None)] * value.ndim
        index[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(index)]

    return tape.record(value, [(p, piece(i)) for i, p in enumerate(parts)])


def matmul(a: Operand, b: Operand):
    av, bv = _value(a), _value(b)
    value = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return value
    return tape.record(value, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def dense(x: Operand, weight: Operand, bias: Operand, activation: str = "affine", slope: float = 0.0):
    """Fused affine layer act(x @ weight + bias).

    Produces the same values and gradients as composing `matmul`, `add` and
    the activation primitive, with a single tape node.
    """
    xv, wv, bv = _value(x), _value(weight), _value(bias)
    z = xv @ wv + bv
    if activation == "affine":
        value = z
        local = None
    elif activation == "tanh":
        value = np.tanh(z)
        local = 1.0 - value * value
    elif activation == "leaky_relu":
        positive = z >= 0.0
        value = np.where(positive, z, slope * z)
        local = np.where(positive, 1.0, slope)
    else:
        raise InvalidInputError(f"unknown activation {activation!r}")
    tape = _tape_of(x, weight, bias)
    if tape is None:
        return value

    def dz(g):
        return g if local is None else g * local

    return tape.record(
        value,
        [
            (x, lambda g: dz(g) @ wv.T),
            (weight, lambda g: xv.T @ dz(g)),
            (bias, lambda g: dz(g).sum(axis=0)),
        ],
    )


def value_of(x: Operand) -> np.ndarray:
    """Forward value of a Var or plain operand."""
    return np.asarray(_value(x))
