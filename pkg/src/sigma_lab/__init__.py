"""sigma_lab: simulation and Monte Carlo verification of reflected
semimartingales, Azema-Yor functionals, crossing estimates and the
Skorokhod embedding of non-atomic laws on the half-line."""

from sigma_lab.grid_rng import TimeGrid, PathSeed, gaussian_increments, cumulate

__all__ = [
    "TimeGrid",
    "PathSeed",
    "gaussian_increments",
    "cumulate",
]

__version__ = "0.1.0"
