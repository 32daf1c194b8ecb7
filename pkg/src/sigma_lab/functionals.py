"""Tabulated monotone functions, primitives, the max/composition identities
of the F(A) - f(A)X functional, and the Bachelier equation solver."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sigma_lab.grid_rng import TimeGrid
from sigma_lab.sigma_processes import SigmaPath


@dataclass(frozen=True)
class MonotoneFn:
    """Strictly increasing tabulated function with linear interpolation.

    Evaluation clamps outside the knot range (callers that care about
    clamping use ``eval_flagged``).  The inverse uses the right-continuous
    convention: a value attained on a flat spot maps to the right end.
    """

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        if knots.ndim != 1 or knots.shape != values.shape or knots.size < 2:
            raise ValueError("knots and values must be 1-d arrays of equal length >= 2")
        if np.any(np.diff(knots) <= 0.0):
            raise ValueError("knots must be strictly increasing")
        if np.any(np.diff(values) <= 0.0):
            raise ValueError("values must be strictly increasing")

    @property
    def x_min(self) -> float:
        return float(self.knots[0])

    @property
    def x_max(self) -> float:
        return float(self.knots[-1])

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.knots, self.values)

    def eval_flagged(self, x) -> tuple[np.ndarray, int]:
        """Evaluate and report how many points fell outside the knot range."""
        x = np.asarray(x, dtype=np.float64)
        clamped = int(np.sum((x < self.knots[0]) | (x > self.knots[-1])))
        return np.interp(x, self.knots, self.values), clamped

    def inverse(self, y) -> np.ndarray:
        return np.interp(y, self.values, self.knots)

    def inverse_fn(self) -> "MonotoneFn":
        return MonotoneFn(knots=self.values.copy(), values=self.knots.copy())


def dedupe_monotone(x: np.ndarray, y: np.ndarray, *, keep: str = "last") -> tuple[np.ndarray, np.ndarray]:
    """Drop knots whose y does not strictly increase.

    ``keep='last'`` keeps the rightmost knot of each flat y-run (the
    right-continuous convention for subsequent inversion).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if keep == "last":
        tail_ok = y[:-1] < y[1:]
        mask = np.concatenate([tail_ok, [True]])
    else:
        head_ok = y[1:] > y[:-1]
        mask = np.concatenate([[True], head_ok])
    return x[mask], y[mask]


# ---------------------------------------------------------------------------
# named scalar-function families (config / CLI surface)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstFn:
    c: float

    def __call__(self, z):
        return np.full_like(np.asarray(z, dtype=np.float64), self.c)


@dataclass(frozen=True)
class AffineFn:
    intercept: float
    slope: float

    def __call__(self, z):
        return self.intercept + self.slope * np.asarray(z, dtype=np.float64)


@dataclass(frozen=True)
class ExpDecayFn:
    rate: float

    def __call__(self, z):
        return np.exp(-self.rate * np.asarray(z, dtype=np.float64))


@dataclass(frozen=True)
class PowerFn:
    """z ** alpha; alpha in (-1, 0) is an integrable singularity at 0."""

    alpha: float

    def __call__(self, z):
        return np.power(np.asarray(z, dtype=np.float64), self.alpha)


@dataclass(frozen=True)
class TabulatedFn:
    table: MonotoneFn = field(repr=False)

    def __call__(self, z):
        return self.table(z)


def load_tabulated_fn(path: str) -> TabulatedFn:
    """Load a scalar function from a CSV with columns (x, value)."""
    xs, ys = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].strip().lower() == "x":
                continue
            try:
                xs.append(float(row[0]))
                ys.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"bad row {i} in {path}: {row}") from exc
    return TabulatedFn(table=MonotoneFn(np.asarray(xs), np.asarray(ys)))


def parse_scalar_fn(spec: str) -> Callable:
    """Parse 'const:c' / 'affine:a,b' / 'exp_decay:lam' / 'power:alpha' / 'csv:path'."""
    name, _, arg = spec.partition(":")
    name = name.strip().lower()
    if name == "const":
        return ConstFn(float(arg))
    if name == "affine":
        a, b = (float(v) for v in arg.split(","))
        return AffineFn(a, b)
    if name == "exp_decay":
        return ExpDecayFn(float(arg))
    if name == "power":
        return PowerFn(float(arg))
    if name == "csv":
        return load_tabulated_fn(arg)
    raise ValueError(f"unknown scalar function family: {spec!r}")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

KNOTS_PER_UNIT = 10_000


def primitive(
    f: Callable,
    x_max: float,
    n_quad: int | None = None,
    *,
    power_singularity: float | None = None,
) -> MonotoneFn:
    """Tabulate F(x) = int_0^x f(z) dz by composite midpoint quadrature.

    The knot set is uniform on [0, x_max].  A declared power singularity
    f ~ c z^alpha with alpha in (-1, 0) replaces the first cell by its
    closed-form integral (midpoint badly underestimates it otherwise).
    Requires f > 0 a.e. so that F is strictly increasing.
    """
    if x_max <= 0.0:
        raise ValueError("x_max must be positive")
    if n_quad is None:
        n_quad = max(2, int(round(KNOTS_PER_UNIT * x_max)))
    if n_quad < 2:
        raise ValueError("n_quad must be >= 2")
    if power_singularity is None and isinstance(f, PowerFn) and -1.0 < f.alpha < 0.0:
        power_singularity = -f.alpha
    knots = np.linspace(0.0, x_max, n_quad + 1)
    h = knots[1]
    mids = knots[:-1] + 0.5 * h
    fx = np.asarray(f(mids), dtype=np.float64)
    if not np.all(np.isfinite(fx)):
        bad = mids[~np.isfinite(fx)][0]
        raise ValueError(f"integrand is not finite at z = {bad}")
    cell = h * fx
    if power_singularity is not None:
        alpha = float(power_singularity)
        if not 0.0 < alpha < 1.0:
            raise ValueError("power singularity exponent must be in (0, 1)")
        coef = float(f(np.array([h]))[0]) * h**alpha
        cell[0] = coef * h ** (1.0 - alpha) / (1.0 - alpha)
    values = np.concatenate([[0.0], np.cumsum(cell)])
    return MonotoneFn(knots=knots, values=values)


# ---------------------------------------------------------------------------
# the F(A) - f(A) X functional
# ---------------------------------------------------------------------------


def azema_yor_transform(S: SigmaPath, f: Callable, F: MonotoneFn) -> np.ndarray:
    """W_k = F(A_k) - f(A_k) X_k, a discrete local-martingale functional of the path."""
    fa = np.asarray(f(S.A), dtype=np.float64)
    return F(S.A) - fa * S.X


def running_max_identity_check(W: np.ndarray, F: MonotoneFn, A: np.ndarray) -> float:
    """Max over the path of |running max of W  -  F(A)|."""
    return float(np.max(np.abs(np.maximum.accumulate(W) - F(A))))


def composition_check(
    S: SigmaPath,
    f: Callable,
    g: Callable,
    *,
    n_quad: int | None = None,
    a_max: float | None = None,
) -> float:
    """Pathwise defect between the composed functional evaluated two ways.

    The left side treats f(A) X as a reflected-type path whose nondecreasing
    part is F(A); the right side uses the directly tabulated primitive of
    g(F) f.  Both sides share the f(A) X term, so the defect reduces to the
    quadrature consistency of G(F(.)) against the composed primitive.
    """
    if a_max is None:
        a_max = float(S.A[-1]) * 1.05 + 1e-6
    F = primitive(f, a_max, n_quad)
    G = primitive(g, float(F.values[-1]) * 1.05 + 1e-6, n_quad)

    def gf(z):
        Fz = F(z)
        return np.asarray(g(Fz), dtype=np.float64) * np.asarray(f(z), dtype=np.float64)

    GF = primitive(gf, a_max, n_quad)
    fa = np.asarray(f(S.A), dtype=np.float64)
    gFa = np.asarray(g(F(S.A)), dtype=np.float64)
    left = G(F(S.A)) - gFa * fa * S.X
    right = GF(S.A) - gFa * fa * S.X
    return float(np.max(np.abs(left - right)))


# ---------------------------------------------------------------------------
# Bachelier equation
# ---------------------------------------------------------------------------


@dataclass
class BachelierResult:
    Y_euler: np.ndarray
    Y_closed: np.ndarray
    clock: MonotoneFn
    inverse_clock: MonotoneFn
    n_clamped: int


def _tabulate_clock(phi: Callable, a_max: float, knots_per_unit: int) -> MonotoneFn:
    """Tabulate V(y) = int_0^y ds / phi(s) out to V(y_max) >= a_max if possible."""
    y_max = 1.0
    for _ in range(60):
        V = primitive(lambda s: 1.0 / np.asarray(phi(s), dtype=np.float64), y_max,
                      max(2, int(knots_per_unit * y_max)))
        if V.values[-1] >= a_max:
            return V
        y_max *= 2.0
    return V  # finite-clock case: caller clamps and flags


def bachelier_solve(
    N: np.ndarray,
    grid: TimeGrid,
    phi: Callable,
    *,
    knots_per_unit: int = KNOTS_PER_UNIT,
) -> BachelierResult:
    """Solve dY = phi(running max of Y) dN, Y_0 = 0, two ways.

    The Euler scheme evaluates phi at the left-endpoint running max
    (predictable evaluation).  The closed form is U(A) - phi(U(A)) X with
    A the running max of the driver, X = A - N, and U the inverse of the
    clock V(y) = int_0^y ds / phi(s); U' = phi(U) removes any numerical
    differentiation.  Evaluations of U beyond the tabulated clock range clamp
    and are counted in ``n_clamped``.
    """
    N = np.asarray(N, dtype=np.float64)
    if N[0] != 0.0:
        raise ValueError("driver must start at 0")
    A = np.maximum.accumulate(np.maximum(N, 0.0))
    X = A - N

    V = _tabulate_clock(phi, float(A[-1]), knots_per_unit)
    U = V.inverse_fn()
    UA, n_clamped = U.eval_flagged(A)
    Y_closed = UA - np.asarray(phi(UA), dtype=np.float64) * X

    dN = np.diff(N)
    Y_euler = np.empty_like(N)
    Y_euler[0] = 0.0
    y = 0.0
    ybar = 0.0
    for k in range(dN.size):
        y = y + float(phi(ybar)) * dN[k]
        ybar = max(ybar, y)
        Y_euler[k + 1] = y
    return BachelierResult(Y_euler=Y_euler, Y_closed=Y_closed, clock=V, inverse_clock=U, n_clamped=n_clamped)
