"""
Tensor helpers: float precision mode and counter-based random streams.

Tensors are plain row-major numpy arrays. Training runs in float32; gradient
checks switch to float64 through `wide_precision()`.
"""
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np

from errors import NumericError, ParameterError

STANDARD_DTYPE = np.float32
WIDE_DTYPE = np.float64

# Stream ids for counter_rng; each consumer draws from its own stream.
STREAM_DROPOUT = 1
STREAM_BATCHES = 2
STREAM_FOLDS = 3
STREAM_INIT = 4
STREAM_POOL = 5
STREAM_CHECKS = 6

_precision = {'dtype': STANDARD_DTYPE}


def current_dtype() -> type:
    """Return the float dtype new tensors are created with."""
    return _precision['dtype']


def is_wide() -> bool:
    """Return True while wide (float64) precision is active."""
    return _precision['dtype'] is WIDE_DTYPE


@contextmanager
def wide_precision() -> Iterator[None]:
    """Run the enclosed block with float64 as the tensor dtype."""
    previous = _precision['dtype']
    _precision['dtype'] = WIDE_DTYPE
    try:
        yield
    finally:
        _precision['dtype'] = previous


def as_tensor(data, dtype: Optional[type] = None) -> np.ndarray:
    """
    Convert data to a contiguous float tensor in the active precision.

    Args:
        data: Array-like values
        dtype: Explicit dtype, defaults to the active precision

    Returns:
        np.ndarray: C-contiguous copy or view with the requested dtype
    """
    return np.ascontiguousarray(data, dtype=dtype or current_dtype())


def ensure_finite(tensor: np.ndarray, what: str) -> None:
    """Raise NumericError if the tensor holds NaN or Inf."""
    if not np.all(np.isfinite(tensor)):
        raise NumericError(f"{what} contains non-finite values")


def counter_rng(seed: int, *counters: int) -> np.random.Generator:
    """
    Build a generator over a Philox counter-based bit generator.

    The key is the seed and the counters fill the three high counter words,
    so every (seed, counters) pair names an independent, reproducible stream.

    Args:
        seed: Non-negative experiment seed
        counters: Up to three non-negative integers (stream id, layer id, step...)

    Returns:
        np.random.Generator: Generator positioned at the start of the stream
    """
    if len(counters) > 3:
        raise ParameterError("counter_rng accepts at most three counters")
    words = [0] + list(counters) + [0] * (3 - len(counters))
    # Word 0 is the one Philox increments while drawing.
    counter = np.array(words, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=int(seed), counter=counter))
