"""Density-martingale scenarios, importance weights, and re-rooting.

A scenario is a simulated density path D with its zero set H and last zero
g-bar.  Statistics downstream are computed under the reweighted measure whose
weights are w_i = |D_terminal,i| / mean |D_terminal|.  With the constant-one
model everything degenerates to the plain unweighted case, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sigma_lab.grid_rng import TimeGrid, PathSeed, gaussian_increments, cumulate
from sigma_lab.sigma_processes import SigmaPath, default_zero_band, zero_mask

# stream tags: one driver and one density stream per path, plus a uniform
# stream for bridge corrections; retries of degenerate density paths move to
# a disjoint tag range.
DRIVER_TAG = 0
DENSITY_TAG = 1
BRIDGE_TAG = 2
DENSITY_RETRY_BASE = 8

# |D_terminal| at or below this is treated as the measure-zero degenerate case
D_TERMINAL_FLOOR = 10 * np.finfo(np.float64).eps

_MAX_RESAMPLE = 8


@dataclass(frozen=True)
class DensityModel:
    name: str
    d0: float = 1.0
    t_stop: float = 1.0

    def __post_init__(self):
        if self.name not in ("constant_one", "brownian_stopped"):
            raise ValueError(f"unknown density model: {self.name!r}")


def parse_density_model(spec: str) -> DensityModel:
    """Parse 'constant_one' or 'brownian_stopped:d0,t_stop'."""
    name, _, arg = spec.partition(":")
    name = name.strip().lower()
    if name == "constant_one":
        return DensityModel(name="constant_one")
    if name == "brownian_stopped":
        d0, t_stop = (float(v) for v in arg.split(",")) if arg else (1.0, 1.0)
        return DensityModel(name="brownian_stopped", d0=d0, t_stop=t_stop)
    raise ValueError(f"unknown density model: {spec!r}")


@dataclass
class DensityScenario:
    """One simulated density path with its zero set and last zero."""

    grid: TimeGrid
    D: np.ndarray
    H_indices: np.ndarray
    g_bar_index: int
    D_terminal: float
    n_resampled: int = 0

    @property
    def g_bar_time(self) -> float:
        return self.g_bar_index * self.grid.dt


def simulate_density(model: DensityModel | str, seed: PathSeed, grid: TimeGrid) -> DensityScenario:
    """Simulate a density scenario; degenerate terminals are resampled and counted.

    constant_one: D = 1, H empty, g-bar = 0, weight 1.
    brownian_stopped: D = d0 + B_{t and t_stop}; H collects zero-band indices
    before t_stop (band 0.5 sqrt(dt) plus sign changes), g-bar is their sup.
    """
    if isinstance(model, str):
        model = parse_density_model(model)
    if model.name == "constant_one":
        D = np.ones(grid.n_steps + 1)
        return DensityScenario(
            grid=grid, D=D, H_indices=np.empty(0, dtype=np.int64),
            g_bar_index=0, D_terminal=1.0,
        )

    stop_idx = grid.index_at(model.t_stop)
    for attempt in range(_MAX_RESAMPLE):
        tag = seed.stream_tag if attempt == 0 else DENSITY_RETRY_BASE + attempt
        s = PathSeed(seed.global_seed, seed.path_index, tag)
        inc = gaussian_increments(s, grid, start=0, count=stop_idx)
        D = np.empty(grid.n_steps + 1)
        D[: stop_idx + 1] = model.d0 + cumulate(inc)
        D[stop_idx:] = D[stop_idx]
        if abs(D[-1]) > D_TERMINAL_FLOOR:
            band = default_zero_band(grid)
            mask = zero_mask(D[: stop_idx + 1], band, signed=True)
            mask[0] = abs(D[0]) <= band
            H = np.flatnonzero(mask)
            g_bar = int(H[-1]) if H.size else 0
            return DensityScenario(
                grid=grid, D=D, H_indices=H, g_bar_index=g_bar,
                D_terminal=float(D[-1]), n_resampled=attempt,
            )
    raise RuntimeError("density terminal degenerate after max resampling attempts")


def build_sigma_h(scenario: DensityScenario, driver_seed: PathSeed) -> SigmaPath:
    """Reflected path re-rooted at the scenario's last density zero.

    X vanishes up to g-bar; from there it is the reflection of the driver
    increments accumulated from g-bar onward, so X and A are exactly zero at
    g-bar and all A-increase falls on zeros of X after it.
    """
    grid = scenario.grid
    g = scenario.g_bar_index
    if g >= grid.n_steps:
        raise ValueError("last density zero leaves no room to run the driver")
    inc = gaussian_increments(driver_seed, grid, start=g, count=grid.n_steps - g)
    N_local = cumulate(inc)
    A_local = np.maximum.accumulate(np.maximum(N_local, 0.0))
    M = np.zeros(grid.n_steps + 1)
    A = np.zeros(grid.n_steps + 1)
    M[g:] = -N_local
    A[g:] = A_local
    return SigmaPath(grid=grid, M=M, A=A)


def reroot(S: SigmaPath, scenario: DensityScenario, *, band: float = 0.0) -> SigmaPath:
    """Shift the path to start at g-bar, resetting its nondecreasing part.

    Flags (raises on) paths whose value at g-bar exceeds the zero band; the
    builder above guarantees an exact zero there.
    """
    g = scenario.g_bar_index
    if abs(S.X[g]) > band:
        raise ValueError(f"X at the re-rooting time exceeds the zero band: {S.X[g]}")
    n_local = S.grid.n_steps - g
    if n_local < 1:
        raise ValueError("nothing remains after the re-rooting time")
    grid = TimeGrid(dt=S.grid.dt, n_steps=n_local)
    return SigmaPath(grid=grid, M=S.M[g:] - S.M[g], A=S.A[g:] - S.A[g])


def tau_inverse(S: SigmaPath, u: float) -> int | None:
    """First grid index where the nondecreasing part exceeds u; None if truncated."""
    if u <= 0.0:
        raise ValueError("u must be positive")
    hits = np.flatnonzero(S.A > u)
    return int(hits[0]) if hits.size else None


def normalized_weights(d_terminals: np.ndarray) -> np.ndarray:
    """Self-normalized importance weights |D_terminal| / mean |D_terminal|."""
    absd = np.abs(np.asarray(d_terminals, dtype=np.float64))
    mean = absd.mean()
    if mean <= 0.0:
        raise ValueError("all density terminals vanish")
    return absd / mean


@dataclass
class WeightedEnsemble:
    """Per-path records in canonical path-index order with their weights.

    ``columns`` holds derived per-path scalars (stop values, times, flags ...).
    The truncated fraction is the weighted share of paths whose defining event
    was still undetermined at the horizon; it rides along with every statistic
    computed from the ensemble.
    """

    weights: np.ndarray
    columns: dict[str, np.ndarray] = field(default_factory=dict)
    truncated_fraction: float = 0.0
    n_rejected: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        n = self.weights.size
        for name, col in self.columns.items():
            if np.asarray(col).shape[0] != n:
                raise ValueError(f"column {name!r} length mismatch")

    @property
    def n_paths(self) -> int:
        return int(self.weights.size)

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    @classmethod
    def from_d_terminals(
        cls,
        d_terminals: np.ndarray,
        columns: dict[str, np.ndarray],
        *,
        truncated: np.ndarray | None = None,
        n_rejected: int = 0,
    ) -> "WeightedEnsemble":
        w = normalized_weights(d_terminals)
        tf = 0.0
        if truncated is not None:
            tf = float(np.sum(w * np.asarray(truncated, dtype=np.float64)) / np.sum(w))
        return cls(weights=w, columns=columns, truncated_fraction=tf, n_rejected=n_rejected)
