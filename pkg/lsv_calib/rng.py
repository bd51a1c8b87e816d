"""Counter-based random streams for reproducible path simulation.

Seeds are split with `numpy.random.SeedSequence` spawn keys: a child seed is
fully determined by (master seed, key path). Paths are grouped into blocks of
a fixed size and each block draws from its own Philox stream keyed by
(seed, block index), so path i is the same no matter how many paths are
simulated or how many workers share the blocks.
"""

# MIT License
#
# Copyright (c) 2024 Dean Thompson

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, TypeVar

import numpy as np

from lsv_calib.exceptions import InvalidInputError

T = TypeVar("T")

# spawn-key tags, kept distinct so streams for different purposes never collide
TAG_MARKET = 1
TAG_TRAIN = 2
TAG_EVAL = 3
TAG_SABR = 4
TAG_RUN = 5
TAG_HEDGE = 6
TAG_INIT = 7
TAG_PERTURB = 8


def derive_seed(master: int, *keys: int) -> int:
    """Child seed of `master` under the spawn-key path `keys`."""
    sequence = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def block_generator(seed: int, block_index: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(block_index),))
    return np.random.Generator(np.random.Philox(sequence))


@dataclass(frozen=True)
class PathBlock:
    index: int
    start: int
    count: int


def path_blocks(n_paths: int, block_size: int) -> list[PathBlock]:
    if n_paths < 1 or block_size < 1:
        raise InvalidInputError(f"need n_paths >= 1 and block_size >= 1, got {n_paths}, {block_size}")
    return [
        PathBlock(index=i, start=start, count=min(block_size, n_paths - start))
        for i, start in enumerate(range(0, n_paths, block_size))
    ]


def block_normals(
    seed: int,
    block: PathBlock,
    block_size: int,
    n_steps: int,
    n_factors: int,
    antithetic: bool = False,
) -> np.ndarray:
    """Standard normals of shape (n_steps, n_factors, block.count).

    The full block is always drawn and then truncated, and steps are the
    leading axis, so a longer horizon only appends rows.
    """
    gen = block_generator(seed, block.index)
    if antithetic:
        half = gen.standard_normal((n_steps, n_factors, (block_size + 1) // 2))
        draws = np.concatenate([half, -half], axis=2)
    else:
        draws = gen.standard_normal((n_steps, n_factors, block_size))
    return draws[:, :, : block.count]


def map_ordered(fn: Callable[[T], object], items: Sequence[T], workers: int = 1) -> Iterator:
    """map(fn, items) over a thread pool; results come back in item order."""
    if workers <= 1 or len(items) <= 1:
        return map(fn, items)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return iter(list(pool.map(fn, items)))
