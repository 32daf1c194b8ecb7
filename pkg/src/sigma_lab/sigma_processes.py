"""Discrete reflected processes and their pathwise transforms.

A path here is the triple (X, M, A) on a uniform grid with X = M + A,
A nondecreasing from 0, and dA supported on the zeros of X.  The reflection
construction (running max of a driver minus the driver) produces such paths
with *exact* zeros at the running-max indices, so zero detection on them uses
band 0; signed Brownian-type paths use a band of half a step-deviation plus
the convention that a sign change across a step counts as a zero at the
earlier index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sigma_lab.grid_rng import TimeGrid

# numerical floor for "nonnegative" path values
EPS_NUM = 1e-9

# default band coefficient for signed Brownian-type paths: band = 0.5 * sqrt(dt)
ZERO_BAND_COEFF = 0.5


def default_zero_band(grid: TimeGrid) -> float:
    return ZERO_BAND_COEFF * np.sqrt(grid.dt)


@dataclass
class SigmaPath:
    """Nonnegative path X = M + A on a grid, with A nondecreasing from 0.

    X is derived from (M, A) in the constructor, so the additive
    decomposition holds bitwise at every index by construction.
    """

    grid: TimeGrid
    M: np.ndarray
    A: np.ndarray
    X: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.grid.n_steps + 1
        for name in ("M", "A"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length n_steps + 1 = {n}")
        if self.A[0] != 0.0:
            raise ValueError("A must start at 0")
        if np.any(np.diff(self.A) < 0.0):
            raise ValueError("A must be nondecreasing")
        self.X = self.M + self.A
        if np.any(self.X < -EPS_NUM):
            raise ValueError("X must be nonnegative up to the numerical floor")

    @classmethod
    def from_x_a(cls, grid: TimeGrid, X: np.ndarray, A: np.ndarray) -> "SigmaPath":
        """Build from (X, A); the stored X = (X - A) + A may differ by 1 ulp."""
        X = np.asarray(X, dtype=np.float64)
        A = np.asarray(A, dtype=np.float64)
        return cls(grid=grid, M=X - A, A=A)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps


@dataclass
class SignedPath:
    """Real-valued path vanishing at zero; may change sign."""

    grid: TimeGrid
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.shape != (self.grid.n_steps + 1,):
            raise ValueError("X length must match the grid")
        if self.X[0] != 0.0:
            raise ValueError("signed paths must start at 0")


@dataclass
class ConformanceReport:
    """Result of a class membership check; failures are carried, not raised."""

    offending_mass: float
    total_increase: float
    additivity_defect: float
    monotonicity_defect: float
    passed: bool


@dataclass
class LevelStopResult:
    path: SigmaPath
    stop_index: int | None
    a_at_stop: float
    truncated: bool
    bridge_stopped: bool


def reflect_from_driver(N: np.ndarray, grid: TimeGrid) -> SigmaPath:
    """Reflection of a driver: A = running max of N (floored at 0), X = A - N.

    The martingale part is M = -N.  A is exact on the grid, and every index
    where A increases has X = 0.0 exactly, so band-0 zero detection works on
    the output.
    """
    N = np.asarray(N, dtype=np.float64)
    if N[0] != 0.0:
        raise ValueError("driver must start at 0")
    A = np.maximum.accumulate(np.maximum(N, 0.0))
    return SigmaPath(grid=grid, M=-N, A=A)


def last_zero_before(X: np.ndarray, k: int, band: float) -> int | None:
    """Largest index j <= k with |X_j| <= band, or None if there is none."""
    X = np.asarray(X)
    if not 0 <= k < X.size:
        raise ValueError(f"index {k} outside the grid")
    hits = np.flatnonzero(np.abs(X[: k + 1]) <= band)
    return int(hits[-1]) if hits.size else None


def zero_mask(X: np.ndarray, band: float, *, signed: bool = False) -> np.ndarray:
    """Boolean mask of zero indices.

    For signed paths a sign change across a step marks a zero at the earlier
    index, in addition to the |X| <= band test.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.abs(X) <= band
    if signed:
        flips = X[:-1] * X[1:] < 0.0
        mask[:-1] |= flips
    return mask


def last_zero_indices(X: np.ndarray, band: float, *, signed: bool = False) -> np.ndarray:
    """g_k for every k: index of the last zero at or before k (0 if none yet)."""
    mask = zero_mask(X, band, signed=signed)
    idx = np.where(mask, np.arange(X.shape[0]), -1)
    g = np.maximum.accumulate(idx)
    return np.where(g < 0, 0, g)


def balayage(
    path: SigmaPath | SignedPath,
    K: np.ndarray,
    *,
    band: float | None = None,
    k_bound: float = 1e6,
) -> np.ndarray:
    """Transform X into K_{g} . X, freezing K at the last zero before each index.

    K is the bounded (predictable) process sampled on the grid; K_{g_0} := K_0
    applies before the first detected zero.
    """
    K = np.asarray(K, dtype=np.float64)
    signed = isinstance(path, SignedPath)
    X = path.X
    if K.shape != X.shape:
        raise ValueError("K must be sampled on the same grid as X")
    if np.max(np.abs(K)) > k_bound:
        raise ValueError(f"K exceeds the configured bound {k_bound}")
    if band is None:
        band = 0.0 if isinstance(path, SigmaPath) else default_zero_band(path.grid)
    g = last_zero_indices(X, band, signed=signed)
    return K[g] * X


def balayage_sigma(S: SigmaPath, K: np.ndarray, *, band: float = 0.0, k_bound: float = 1e6) -> SigmaPath:
    """Balayage of a reflected-type path, with the transformed decomposition.

    The finite-variation part of K_g . X accumulates K_g dA; requires K >= 0 at
    the increase indices of A so the result still has a nondecreasing part.
    """
    Y = balayage(S, K, band=band, k_bound=k_bound)
    g = last_zero_indices(S.X, band)
    dA = np.diff(S.A)
    A_Y = np.empty_like(S.A)
    A_Y[0] = 0.0
    np.cumsum(K[g[1:]] * dA, out=A_Y[1:])
    return SigmaPath(grid=S.grid, M=Y - A_Y, A=A_Y)


def sign_balayage(path: SignedPath, *, band: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Excursion-sign process at g and the sign . |X| reconstruction.

    Within an excursion the sign is constant, so the sign at the last zero
    before k is the sign of X_k itself whenever X_k is outside the band.
    The reconstruction K_g |X| therefore equals X exactly there.
    """
    X = path.X
    in_band = np.abs(X) <= band
    K_at_g = np.where(in_band, 0.0, np.sign(X))
    return K_at_g, K_at_g * np.abs(X)


def local_time_estimate(path: SignedPath, level: float = 0.0) -> np.ndarray:
    """Discrete Tanaka estimator of the local time of X at ``level``.

    L_k = |X_k - level| - |X_0 - level| - sum_{j<=k} sgn(X_{j-1} - level) dX_j.
    Nondecreasing up to O(sqrt(dt)) fluctuations; increments concentrate at
    crossings of the level.
    """
    Y = path.X - level
    stoch = np.empty_like(Y)
    stoch[0] = 0.0
    np.cumsum(np.sign(Y[:-1]) * np.diff(Y), out=stoch[1:])
    return np.abs(Y) - np.abs(Y[0]) - stoch


def occupation_time_estimate(path: SignedPath, level: float, eps: float) -> float:
    """Occupation-time local time estimate (1 / 2 eps) * time spent within eps."""
    inside = np.abs(path.X[:-1] - level) <= eps
    return float(inside.sum() * path.grid.dt / (2.0 * eps))


def bridge_step_maxima(N: np.ndarray, dt: float, uniforms: np.ndarray) -> np.ndarray:
    """Exact per-step supremum of the driver given its endpoints.

    For each step, the maximum of a Brownian bridge between N_k and N_{k+1}
    is sampled by inverting its Rayleigh-type conditional law; the result is
    jointly exact in law with the endpoints.
    """
    N = np.asarray(N, dtype=np.float64)
    a, b = N[:-1], N[1:]
    u = np.asarray(uniforms, dtype=np.float64)
    if u.shape != a.shape:
        raise ValueError("need one uniform per step")
    return 0.5 * (a + b + np.sqrt((b - a) ** 2 - 2.0 * dt * np.log(u)))


def exact_sup_reflect(N: np.ndarray, dt: float, uniforms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reflected values (X, A) with A the exact continuous-time running sup.

    Unlike the grid-only reflection, X is strictly positive at every index
    past 0 almost surely (the sup is attained inside a step), so the output
    is meant for distributional work (stopping laws), not for the band-0
    pathwise identities.
    """
    M = bridge_step_maxima(N, dt, uniforms)
    A = np.empty_like(N)
    A[0] = 0.0
    np.maximum.accumulate(M, out=A[1:])
    A[1:] = np.maximum(A[1:], 0.0)
    return A - N, A


def bridge_crossing_prob(x0: np.ndarray, x1: np.ndarray, level, dt: float) -> np.ndarray:
    """P(a Brownian bridge from x0 to x1 over one step touches ``level``).

    Valid when both endpoints are on the same side; endpoints at or across the
    level give probability 1.
    """
    a = np.asarray(level) - x0
    b = np.asarray(level) - x1
    crossed = (a <= 0.0) | (b <= 0.0)
    with np.errstate(over="ignore"):
        p = np.exp(np.minimum(-2.0 * a * b / dt, 0.0))
    return np.where(crossed, 1.0, p)


def stop_at_level(
    S: SigmaPath,
    a: float,
    *,
    bridge: bool = True,
    bridge_uniforms: np.ndarray | None = None,
) -> LevelStopResult:
    """Freeze the path at its first crossing of the level a > 0.

    Detection is the first grid index with X >= a; with ``bridge`` on, an
    intra-step crossing is sampled with the Brownian-bridge touch probability,
    using one uniform per step from ``bridge_uniforms``.  The frozen value is
    a exactly, and A freezes simultaneously (A cannot increase on the crossing
    step since X > 0 there).
    """
    if a <= 0.0:
        raise ValueError("level must be positive")
    X, A = S.X, S.A
    dt = S.grid.dt
    hard = np.flatnonzero(X >= a)
    hard_idx = int(hard[0]) if hard.size else None
    stop_idx = hard_idx
    bridged = False
    if bridge:
        if bridge_uniforms is None:
            raise ValueError("bridge correction needs one uniform per step")
        limit = hard_idx if hard_idx is not None else S.n_steps
        p = bridge_crossing_prob(X[:limit], X[1 : limit + 1], a, dt)
        fired = np.flatnonzero(bridge_uniforms[:limit] < p)
        if fired.size:
            stop_idx = int(fired[0]) + 1
            bridged = stop_idx != hard_idx
    if stop_idx is None:
        return LevelStopResult(path=S, stop_index=None, a_at_stop=float(A[-1]), truncated=True, bridge_stopped=False)
    a_at_stop = float(A[stop_idx - 1]) if bridged and stop_idx > 0 else float(A[stop_idx])
    Ms, As = S.M.copy(), A.copy()
    As[stop_idx:] = a_at_stop
    Ms[stop_idx:] = a - a_at_stop
    frozen = SigmaPath(grid=S.grid, M=Ms, A=As)
    return LevelStopResult(path=frozen, stop_index=stop_idx, a_at_stop=a_at_stop, truncated=False, bridge_stopped=bridged)


def sigma_class_check(
    S: SigmaPath,
    zero_band: float = 0.0,
    tol: float = 0.0,
    *,
    extra_carrier: np.ndarray | None = None,
) -> ConformanceReport:
    """Check that dA charges only the zero set (plus an optional extra carrier).

    The offending mass is the total A-increase on steps whose endpoints both
    sit above the zero band and which the extra carrier does not cover; the
    check passes when it is at most tol * A_end, the decomposition X = M + A
    is exact, and A is nondecreasing.
    """
    dA = np.diff(S.A)
    ends_min = np.minimum(S.X[:-1], S.X[1:])
    off = ends_min > zero_band
    if extra_carrier is not None:
        carrier = np.asarray(extra_carrier, dtype=bool)
        on_extra = carrier[:-1] | carrier[1:]
        off &= ~on_extra
    offending = float(np.sum(np.where(off, np.maximum(dA, 0.0), 0.0)))
    total = float(S.A[-1])
    additivity = float(np.max(np.abs(S.X - (S.M + S.A))))
    monotonicity = float(max(0.0, -np.min(np.diff(S.A), initial=0.0)))
    passed = offending <= tol * total and additivity == 0.0 and monotonicity == 0.0
    return ConformanceReport(
        offending_mass=offending,
        total_increase=total,
        additivity_defect=additivity,
        monotonicity_defect=monotonicity,
        passed=bool(passed),
    )
