"""
Counter-based splitmix64 random streams.

Each consumer (parameter init, data synthesis, patch sampling, ...) draws from
its own named stream so adding draws in one place never shifts another. The
integer sequence depends only on (seed, stream name), on every platform.
"""

import logging
import zlib
from typing import Sequence, Tuple, Union

import numpy as np

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

Shape = Union[int, Sequence[int]]


def mix64(value: int) -> int:
    """Scalar splitmix64 finalizer."""
    z = value & _MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: Union[int, str]) -> int:
    """Fold integer or string keys into a seed, e.g. (manifest seed, sample index)."""
    value = mix64(seed)
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        value = mix64(value ^ mix64(int(key) + _GOLDEN))
    return value


class Rng:
    """Named splitmix64 stream."""

    def __init__(self, seed: int, stream: str = "default"):
        self.seed = int(seed)
        self.stream = stream
        self.state = derive_seed(self.seed, stream)
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r}, counter={self.counter})"

    def child(self, name: Union[int, str]) -> "Rng":
        """Independent stream keyed by this stream's identity and ``name``."""
        return Rng(derive_seed(self.seed, self.stream, name), f"{self.stream}/{name}")

    def next_u64(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(_GOLDEN)
        self.counter += count
        return _mix64_array(z)

    def uniform(self, shape: Shape = (), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = _as_shape(shape)
        count = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(count) >> np.uint64(11)
        unit = bits.astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * unit).reshape(shape)

    def normal(self, shape: Shape = (), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = _as_shape(shape)
        count = int(np.prod(shape, dtype=np.int64))
        u1 = 1.0 - self.uniform((count,))
        u2 = self.uniform((count,))
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, shape: Shape = ()) -> np.ndarray:
        """Integers in [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        draws = self.uniform(shape)
        return np.minimum(low + np.floor(draws * (high - low)).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


def _as_shape(shape: Shape) -> Tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
