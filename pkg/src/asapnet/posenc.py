"""Sinusoidal encoding of absolute pixel coordinates.

For octaves k = 1..K each axis contributes (sin, cos) of 2*pi*p / 2**k, so
the finest octave has a period of 2 pixels and the coarsest a period of
2**K = S pixels. Channel order is all x octaves first, then all y octaves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from asapnet.errors import ConfigurationError


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class PositionalEncodingSpec:
    depth: int  # K; 0 disables the encoding

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigurationError(f"encoding depth must be >= 0, got {self.depth}")

    @classmethod
    def from_downsampling(cls, total_downsampling: int) -> "PositionalEncodingSpec":
        if not is_power_of_two(total_downsampling):
            raise ConfigurationError(
                f"total downsampling must be a power of two, got {total_downsampling}"
            )
        return cls(depth=total_downsampling.bit_length() - 1)

    @property
    def total_downsampling(self) -> int:
        return 2**self.depth

    @property
    def channels(self) -> int:
        return 4 * self.depth


def _axis_values(p: int, depth: int) -> list[float]:
    """[sin_1, cos_1, ..., sin_K, cos_K] for one coordinate."""
    values = []
    for k in range(1, depth + 1):
        period = 2**k
        # reduce first so that p and p + period give bit-identical values
        theta = 2.0 * math.pi * (p % period) / period
        values += [math.sin(theta), math.cos(theta)]
    return values


def _axis_table(n: int, depth: int) -> np.ndarray:
    table = np.array([_axis_values(p, depth) for p in range(n)], dtype=np.float64)
    return table.reshape(n, 2 * depth).T


def encode_position(p: tuple[int, int], spec: PositionalEncodingSpec) -> np.ndarray:
    x, y = p
    if x < 0 or y < 0:
        raise ConfigurationError(f"pixel coordinates must be non-negative, got {p}")
    return np.array(_axis_values(x, spec.depth) + _axis_values(y, spec.depth))


def encode_grid(
    height: int, width: int, spec: PositionalEncodingSpec, dtype=np.float64
) -> np.ndarray:
    """Encoding for every pixel, shape (1, 4K, height, width); x is the width index."""
    if height < 1 or width < 1:
        raise ConfigurationError(f"grid extents must be >= 1, got {height}x{width}")
    k2 = 2 * spec.depth
    tx = _axis_table(width, spec.depth)
    ty = _axis_table(height, spec.depth)
    out = np.empty((1, 2 * k2, height, width), dtype=dtype)
    out[0, :k2] = tx[:, None, :]
    out[0, k2:] = ty[:, :, None]
    return out
