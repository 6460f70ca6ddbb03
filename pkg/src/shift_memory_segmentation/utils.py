"""utils functions"""

import hashlib
from typing import BinaryIO

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


class SplitMix64:
    """
    splitmix64 generator. `next_u64` and `draw` share one stream, so scalar and
    vectorised draws can be interleaved.

    Args:
        seed (int): 64-bit seed, reduced modulo 2**64.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        """Next 64-bit output."""
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def draw(self, count: int) -> np.ndarray:
        """
        Next `count` outputs as a uint64 array.

        Args:
            count (int): number of values to draw.

        Returns:
            np.ndarray: dtype uint64, shape (count,).
        """
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def units(self, count: int) -> np.ndarray:
        """Next `count` doubles in [0, 1), each from the top 53 bits of one output."""
        return (self.draw(count) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def symmetric_uniform(generator: SplitMix64, count: int, half_width: float) -> np.ndarray:
    """
    Draw float32 values in [-half_width, +half_width).

    The mapping is (u - 0.5) * 2 * half_width computed in double precision,
    then rounded once to float32.
    """
    return ((generator.units(count) - 0.5) * (2.0 * half_width)).astype(np.float32)


def read_exact(source: BinaryIO, size: int) -> bytes:
    """
    Read up to `size` bytes, looping over short reads (pipes).

    Returns fewer bytes only at end of stream.
    """
    chunks = []
    remaining = size
    while remaining:
        chunk = source.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def file_sha256(path: str) -> str:
    """Hex digest of a file, used to compare run outputs."""
    digest = hashlib.sha256()
    with open(path, "rb") as file:
        for block in iter(lambda: file.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
