"""Seeded batch plans, k-fold splits and desk-scale subsets."""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from errors import ParameterError
from numerics.tensor import STREAM_BATCHES, STREAM_FOLDS, STREAM_POOL, counter_rng


@dataclass(frozen=True)
class BatchPlan:
    """Consecutive index batches over one shuffled epoch."""
    seed: int
    batch_size: int
    batches: List[np.ndarray]

    def sizes(self) -> List[int]:
        return [len(batch) for batch in self.batches]


@dataclass(frozen=True)
class FoldSplit:
    """K ordered (train indices, validation indices) pairs."""
    folds: List[Tuple[np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return len(self.folds)


def make_batches(n: int, batch_size: int, seed: int, epoch: int = 0) -> BatchPlan:
    """
    Shuffle range(n) with the (seed, epoch) stream and cut it into batches;
    the final partial batch is kept.

    Raises:
        ParameterError: If n < 1 or batch_size < 1
    """
    if n < 1:
        raise ParameterError(f"Cannot plan batches over {n} instances")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    order = counter_rng(seed, STREAM_BATCHES, epoch).permutation(n)
    batches = [order[start:start + batch_size] for start in range(0, n, batch_size)]
    return BatchPlan(seed=seed, batch_size=batch_size, batches=batches)


def kfold_split(n: int, k: int, seed: int) -> FoldSplit:
    """
    Seeded shuffle followed by k contiguous validation slices whose sizes
    differ by at most one (larger slices first).

    Raises:
        ParameterError: If k < 2 or n < k
    """
    if k < 2:
        raise ParameterError(f"K-fold needs at least 2 folds, got {k}")
    if n < k:
        raise ParameterError(f"Cannot split {n} instances into {k} folds")
    order = counter_rng(seed, STREAM_FOLDS).permutation(n)
    slices = np.array_split(order, k)
    folds = []
    for i, validation in enumerate(slices):
        train = np.concatenate([s for j, s in enumerate(slices) if j != i])
        folds.append((train, validation))
    return FoldSplit(folds)


def sample_pool(n: int, size: int, seed: int) -> np.ndarray:
    """Seeded subset of `size` indices out of range(n), kept in ascending order."""
    if size >= n:
        return np.arange(n)
    if size < 1:
        raise ParameterError(f"Subset size must be positive, got {size}")
    chosen = counter_rng(seed, STREAM_POOL).permutation(n)[:size]
    return np.sort(chosen)
