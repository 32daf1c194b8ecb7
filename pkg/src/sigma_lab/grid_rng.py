"""Uniform time grids and reproducible Gaussian increment streams.

Every path simulated anywhere in this package is a pure function of a
``(global_seed, path_index, stream_tag)`` triple.  Increments come from a
counter-based Philox generator, so any window ``[start, start + count)`` of a
stream can be produced without generating its prefix.  This is what makes
chunked / multi-threaded ensemble runs bit-identical to single-threaded ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

# Philox-4x64 emits four 64-bit words per counter tick; ``advance`` moves the
# counter in ticks, so random access to raw output i needs (i // 4, i % 4).
_WORDS_PER_TICK = 4

_MAX_PATH_INDEX = 1 << 48
_MAX_STREAM_TAG = 1 << 16


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * dt for k = 0 .. n_steps."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be a positive finite real, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def t_max(self) -> float:
        return self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_at(self, t: float) -> int:
        """Grid index closest to time t (clipped to the grid)."""
        return int(np.clip(round(t / self.dt), 0, self.n_steps))

    @classmethod
    def from_horizon(cls, dt: float, t_max: float) -> "TimeGrid":
        return cls(dt=dt, n_steps=max(1, int(round(t_max / dt))))


@dataclass(frozen=True)
class PathSeed:
    """Identifies one independent increment stream.

    Distinct (global_seed, path_index, stream_tag) triples map to distinct
    Philox keys, hence statistically independent streams.
    """

    global_seed: int
    path_index: int = 0
    stream_tag: int = 0

    def __post_init__(self):
        if not 0 <= self.path_index < _MAX_PATH_INDEX:
            raise ValueError(f"path_index out of range: {self.path_index}")
        if not 0 <= self.stream_tag < _MAX_STREAM_TAG:
            raise ValueError(f"stream_tag out of range: {self.stream_tag}")

    def philox_key(self) -> np.ndarray:
        lo = np.uint64(self.global_seed & 0xFFFFFFFFFFFFFFFF)
        hi = np.uint64(self.path_index) | (np.uint64(self.stream_tag) << np.uint64(48))
        return np.array([lo, hi], dtype=np.uint64)


def raw_uniforms(seed: PathSeed, start: int, count: int) -> np.ndarray:
    """Draws ``count`` uniforms in (0, 1) from positions [start, start+count).

    Pure function of (seed, start, count); windows of the same stream tile
    exactly: concatenating [0, a) and [a, b) equals [0, b).
    """
    if count < 0 or start < 0:
        raise ValueError("start and count must be nonnegative")
    if count == 0:
        return np.empty(0)
    bg = Philox(key=seed.philox_key())
    ticks, skip = divmod(start, _WORDS_PER_TICK)
    if ticks:
        bg.advance(ticks)
    raw = bg.random_raw(skip + count)[skip:]
    # 53-bit mantissa, offset half a gap so u is strictly inside (0, 1)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53 + 2.0**-54


def gaussian_increments(
    seed: PathSeed, grid: TimeGrid, *, start: int = 0, count: int | None = None
) -> np.ndarray:
    """i.i.d. normal(0, dt) increments for the given stream.

    By default returns the full stream of ``grid.n_steps`` values; ``start``
    and ``count`` select a window of the same stream for block-wise
    simulation.  Identical inputs give bitwise-identical output regardless of
    call order or thread.
    """
    if count is None:
        count = grid.n_steps - start
    if count < 0 or start + count > grid.n_steps:
        raise ValueError("window exceeds the grid")
    if grid.n_steps == 0:
        raise ValueError("grid must have at least one step")
    u = raw_uniforms(seed, start, count)
    return ndtri(u) * np.sqrt(grid.dt)


def cumulate(increments: np.ndarray) -> np.ndarray:
    """Prefix sums prepended with 0: increments of length n -> path of length n+1."""
    increments = np.asarray(increments, dtype=np.float64)
    if increments.size == 0:
        raise ValueError("increment sequence must be nonempty")
    out = np.empty(increments.size + 1)
    out[0] = 0.0
    np.cumsum(increments, out=out[1:])
    return out
