"""Target laws on the half-line, the dual Hardy-Littlewood barrier, and the
stopping rules that embed a non-atomic law in a reflected-type path."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, erfinv

from sigma_lab.grid_rng import PathSeed, raw_uniforms
from sigma_lab.functionals import MonotoneFn, dedupe_monotone
from sigma_lab.sigma_processes import SigmaPath, bridge_crossing_prob

# laws with unbounded support are tabulated out to this tail mass
TAIL_MASS = 1e-6

PSI_CELLS = 20_000


class LawValidationError(ValueError):
    """Raised when a law specification fails validation (knows the bad row)."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class TargetLaw:
    """Non-atomic probability law on [0, inf) seen through its tail function.

    Subclasses provide ``tail`` (nonincreasing, continuous, tail(0) = 1),
    ``quantile`` and a label; the support bounds a_nu (largest x with full
    tail) and b_nu (smallest x with zero tail, possibly inf) are attributes.
    """

    name: str = "law"
    a_nu: float = 0.0
    b_nu: float = np.inf

    def tail(self, x):
        raise NotImplementedError

    def cdf(self, x):
        return 1.0 - self.tail(x)

    def quantile(self, p):
        raise NotImplementedError

    def sample(self, n: int, seed: PathSeed) -> np.ndarray:
        """Inverse-transform sampling from a counter-based uniform stream."""
        return self.quantile(raw_uniforms(seed, 0, n))

    def label(self) -> str:
        return self.name


class ExpLaw(TargetLaw):
    def __init__(self, theta: float):
        if theta <= 0.0:
            raise LawValidationError("exponential rate must be positive")
        self.theta = theta
        self.name = f"exp:{theta:g}"
        self.a_nu, self.b_nu = 0.0, np.inf

    def tail(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x <= 0.0, 1.0, np.exp(-self.theta * x))

    def quantile(self, p):
        return -np.log1p(-np.asarray(p, dtype=np.float64)) / self.theta


class UniformLaw(TargetLaw):
    def __init__(self, lo: float, hi: float):
        if not (0.0 <= lo < hi):
            raise LawValidationError("uniform law needs 0 <= lo < hi")
        self.lo, self.hi = lo, hi
        self.name = f"uniform:{lo:g},{hi:g}"
        self.a_nu, self.b_nu = lo, hi

    def tail(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.clip((self.hi - x) / (self.hi - self.lo), 0.0, 1.0)

    def quantile(self, p):
        return self.lo + np.asarray(p, dtype=np.float64) * (self.hi - self.lo)


class WeibullLaw(TargetLaw):
    def __init__(self, shape: float, scale: float):
        if shape <= 0.0 or scale <= 0.0:
            raise LawValidationError("weibull shape and scale must be positive")
        self.shape, self.scale = shape, scale
        self.name = f"weibull:{shape:g},{scale:g}"
        self.a_nu, self.b_nu = 0.0, np.inf

    def tail(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x <= 0.0, 1.0, np.exp(-((np.maximum(x, 0.0) / self.scale) ** self.shape)))

    def quantile(self, p):
        return self.scale * (-np.log1p(-np.asarray(p, dtype=np.float64))) ** (1.0 / self.shape)


class HalfNormalLaw(TargetLaw):
    def __init__(self, sigma: float):
        if sigma <= 0.0:
            raise LawValidationError("half-normal sigma must be positive")
        self.sigma = sigma
        self.name = f"halfnormal:{sigma:g}"
        self.a_nu, self.b_nu = 0.0, np.inf

    def tail(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x <= 0.0, 1.0, 1.0 - erf(np.maximum(x, 0.0) / (self.sigma * np.sqrt(2.0))))

    def quantile(self, p):
        return self.sigma * np.sqrt(2.0) * erfinv(np.asarray(p, dtype=np.float64))


class TabulatedLaw(TargetLaw):
    """Law given by a (x, cdf) table; validated strictly on load."""

    def __init__(self, x: np.ndarray, cdf: np.ndarray, name: str = "tabulated"):
        x = np.asarray(x, dtype=np.float64)
        cdf = np.asarray(cdf, dtype=np.float64)
        if x.size < 2:
            raise LawValidationError("law table needs at least two rows")
        if x[0] < 0.0:
            raise LawValidationError("law support must lie in [0, inf)", row=0)
        for i in range(1, x.size):
            if x[i] <= x[i - 1]:
                raise LawValidationError(f"x column not strictly increasing at row {i}", row=i)
            if cdf[i] < cdf[i - 1]:
                raise LawValidationError(f"cdf column decreases at row {i}", row=i)
        if not (abs(cdf[0]) < 1e-9 and abs(cdf[-1] - 1.0) < 1e-9):
            raise LawValidationError("cdf must run from 0 to 1")
        self.x = x
        self.c = cdf
        self.name = name
        self.a_nu = float(x[np.searchsorted(cdf, 0.0, side="right") - 1])
        self.b_nu = float(x[np.searchsorted(cdf, 1.0, side="left")])

    def tail(self, x):
        return 1.0 - np.interp(x, self.x, self.c)

    def quantile(self, p):
        xq, cq = dedupe_monotone(self.x, self.c, keep="last")
        return np.interp(p, cq, xq)


def load_tabulated_law(path: str, name: str | None = None) -> TabulatedLaw:
    xs, cs = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].strip().lower() == "x":
                continue
            try:
                xs.append(float(row[0]))
                cs.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise LawValidationError(f"bad row {i} in {path}: {row}", row=i) from exc
    return TabulatedLaw(np.asarray(xs), np.asarray(cs), name=name or f"csv:{path}")


def parse_law(spec: str) -> TargetLaw:
    """Parse 'exp:theta' / 'uniform:a,b' / 'weibull:k,lam' / 'halfnormal:sigma' / 'csv:path'."""
    name, _, arg = spec.partition(":")
    name = name.strip().lower()
    if name == "exp":
        return ExpLaw(float(arg))
    if name == "uniform":
        lo, hi = (float(v) for v in arg.split(","))
        return UniformLaw(lo, hi)
    if name == "weibull":
        k, lam = (float(v) for v in arg.split(","))
        return WeibullLaw(k, lam)
    if name == "halfnormal":
        return HalfNormalLaw(float(arg))
    if name == "csv":
        return load_tabulated_law(arg)
    raise LawValidationError(f"unknown law family: {spec!r}")


# ---------------------------------------------------------------------------
# the dual Hardy-Littlewood function and its inverse
# ---------------------------------------------------------------------------


def psi(law: TargetLaw, n_quad: int | None = None) -> MonotoneFn:
    """Tabulate Psi(x) = int_[0,x] z / tail(z) d nu(z) on [a_nu, x_hi].

    Increments use the exact per-cell mass through the law's tail function,
    Delta = z_mid * (log tail(z_i) - log tail(z_{i+1})), so laws with an
    exponential tail are integrated exactly.  x_hi is the support top for
    bounded laws and the 1e-6 tail quantile otherwise (values beyond the
    table stand in for the +inf branch past b_nu).
    """
    if n_quad is None:
        n_quad = PSI_CELLS
    if n_quad < 2:
        raise ValueError("n_quad must be >= 2")
    x_hi = float(law.quantile(1.0 - TAIL_MASS))
    if not x_hi > law.a_nu:
        raise LawValidationError("law has no mass above a_nu")
    knots = np.linspace(law.a_nu, x_hi, n_quad + 1)
    logtail = np.log(np.maximum(law.tail(knots), 1e-300))
    if not np.all(np.isfinite(logtail)):
        bad = knots[~np.isfinite(logtail)][0]
        raise LawValidationError(f"tail vanished inside the tabulation range at x = {bad}")
    mids = 0.5 * (knots[:-1] + knots[1:])
    incr = mids * (logtail[:-1] - logtail[1:])
    values = np.concatenate([[0.0], np.cumsum(incr)])
    k, v = dedupe_monotone(knots, values, keep="first")
    return MonotoneFn(knots=k, values=v)


def phi_from_psi(psi_fn: MonotoneFn) -> MonotoneFn:
    """Right-continuous inverse of the tabulated Psi; strictly increasing.

    phi(0) returns the lower support bound a_nu (the left end of the Psi
    table); values beyond the tabulated range clamp to the last knot, which
    callers flag.
    """
    z, x = dedupe_monotone(psi_fn.values, psi_fn.knots, keep="last")
    return MonotoneFn(knots=z, values=x)


# ---------------------------------------------------------------------------
# stopping rules
# ---------------------------------------------------------------------------


@dataclass
class StoppingOutcome:
    """Where a stopping rule fired on one path (or that it never did)."""

    stop_index: int | None
    truncated: bool
    x_at_stop: float
    x_raw: float
    a_at_stop: float
    time: float
    bridge_stopped: bool = False
    barrier_clamped: bool = False
    sweep_stopped: bool = False

    @classmethod
    def truncated_at(cls, n_steps: int, dt: float, a_end: float) -> "StoppingOutcome":
        return cls(stop_index=None, truncated=True, x_at_stop=np.nan, x_raw=np.nan,
                   a_at_stop=a_end, time=n_steps * dt)


@dataclass(frozen=True)
class SweepCorrection:
    """Sub-step hazard for barrier levels the grid cannot race.

    While A sweeps (z_lo, z_hi] within one step, excursions attempting
    barriers phi(z) <= kappa sqrt(dt) are too shallow/short to span a grid
    step, so the grid scan misses them entirely; their exact excursion hazard
    is dz / phi(z), and the integral up to the swept level has the closed
    form H(z) = -log tail(phi(z)).  Levels with deeper barriers are left to
    the resolved scan (an excursion that deep cannot fit inside one step, so
    nothing is double-counted).  A firing sweep yields a crossing value drawn
    from the law conditioned between the swept barrier levels, which is the
    exact conditional law of the missed crossing.
    """

    law: TargetLaw
    phi_nu: MonotoneFn
    kappa: float = 4.0

    def cap_barrier(self, dt: float) -> float:
        return self.kappa * np.sqrt(dt)

    def fire(self, z_lo: float, z_hi: float, dt: float, u: float) -> float | None:
        """Crossing value if the swept-hazard event fires on this step, else None."""
        y_cap = self.cap_barrier(dt)
        y_lo = float(self.phi_nu(z_lo))
        y_hi = min(float(self.phi_nu(z_hi)), y_cap)
        if y_hi <= y_lo:
            return None
        s_lo = float(self.law.tail(y_lo))
        s_hi = float(self.law.tail(y_hi))
        if s_lo <= 0.0:
            return None
        p = 1.0 - s_hi / s_lo
        if u >= p:
            return None
        w = u / p
        target_tail = s_lo - w * (s_lo - s_hi)
        return float(self.law.quantile(1.0 - target_tail))


def _barrier_values(phi: Callable | MonotoneFn, A: np.ndarray) -> tuple[np.ndarray, int]:
    if isinstance(phi, MonotoneFn):
        return phi.eval_flagged(A)
    return np.asarray(phi(A), dtype=np.float64), 0


def stop_T_phi(
    S: SigmaPath,
    phi: Callable | MonotoneFn,
    *,
    bridge: bool = True,
    bridge_uniforms: np.ndarray | None = None,
    sweep: SweepCorrection | None = None,
    sweep_uniforms: np.ndarray | None = None,
) -> StoppingOutcome:
    """First time X reaches the moving barrier phi(A).

    The scan starts at index 1 (the t = 0 equality X_0 = phi(0) = 0 of laws
    supported down to zero is the degenerate origin case, excluded as in the
    continuous-time rule inf{t > 0}); a step can only trigger once the barrier
    is strictly positive.  With ``bridge`` on, an intra-step crossing of the
    left-endpoint-frozen barrier is sampled with the Brownian-bridge touch
    probability; ``sweep`` additionally races the sub-resolution barrier
    levels swept on A-increase steps.  The crossing value x_at_stop is the
    barrier at the stop (the path value there is kept as x_raw).
    """
    X, A = S.X, S.A
    dt = S.grid.dt
    barrier, n_clamped = _barrier_values(phi, A)
    armed = barrier > 0.0
    hard = armed[1:] & (X[1:] >= barrier[1:])
    hard_hits = np.flatnonzero(hard)
    stop_idx = int(hard_hits[0]) + 1 if hard_hits.size else None
    bridged = False
    if bridge:
        if bridge_uniforms is None:
            raise ValueError("bridge correction needs one uniform per step")
        limit = (stop_idx - 1) if stop_idx is not None else S.n_steps
        b = barrier[:limit]
        ok = (b > 0.0) & (X[:limit] < b) & (X[1 : limit + 1] < b)
        p = np.where(ok, bridge_crossing_prob(X[:limit], X[1 : limit + 1], b, dt), 0.0)
        fired = np.flatnonzero(bridge_uniforms[:limit] < p)
        if fired.size:
            stop_idx = int(fired[0]) + 1
            bridged = True
    sweep_value = None
    if sweep is not None:
        if sweep_uniforms is None:
            raise ValueError("sweep correction needs one uniform per step")
        z_cap = float(sweep.phi_nu.inverse(sweep.cap_barrier(dt)))
        limit = (stop_idx - 1) if stop_idx is not None else S.n_steps
        cand = np.flatnonzero((np.diff(A[: limit + 1]) > 0.0) & (A[:limit] < z_cap))
        for k in cand:
            v = sweep.fire(float(A[k]), float(A[k + 1]), dt, float(sweep_uniforms[k]))
            if v is not None:
                stop_idx = int(k) + 1
                bridged = False
                sweep_value = v
                break
    if stop_idx is None:
        return StoppingOutcome.truncated_at(S.n_steps, dt, float(A[-1]))
    if sweep_value is not None:
        return StoppingOutcome(
            stop_index=stop_idx, truncated=False, x_at_stop=sweep_value,
            x_raw=np.nan, a_at_stop=float(sweep.phi_nu.inverse(sweep_value)),
            time=stop_idx * dt, sweep_stopped=True, barrier_clamped=n_clamped > 0,
        )
    level = float(barrier[stop_idx - 1]) if bridged else float(barrier[stop_idx])
    a_stop = float(A[stop_idx - 1]) if bridged else float(A[stop_idx])
    return StoppingOutcome(
        stop_index=stop_idx, truncated=False, x_at_stop=level,
        x_raw=float(X[stop_idx]), a_at_stop=a_stop, time=stop_idx * dt,
        bridge_stopped=bridged, barrier_clamped=n_clamped > 0,
    )


def stop_R_h(
    S: SigmaPath,
    h: Callable,
    *,
    bridge: bool = True,
    bridge_uniforms: np.ndarray | None = None,
) -> StoppingOutcome:
    """First time h(A) X reaches 1 (upward crossing convention).

    Equivalent to the moving-barrier rule with barrier 1 / h(A); implemented
    directly on the product so the pair can be cross-checked.
    """
    hA = np.asarray(h(S.A), dtype=np.float64)
    if np.any(hA < 0.0):
        raise ValueError("h must be nonnegative on the visited A-range")
    with np.errstate(divide="ignore"):
        barrier = np.where(hA > 0.0, 1.0 / hA, np.inf)

    def phi(_A):  # barrier already evaluated on this path's A values
        return barrier

    return stop_T_phi(S, phi, bridge=bridge, bridge_uniforms=bridge_uniforms)


def crossing_indicator(
    S: SigmaPath,
    phi: Callable | MonotoneFn,
    u: float,
    *,
    bridge: bool = True,
) -> tuple[float, bool]:
    """Probability that X exceeds phi(A) strictly before A leaves [0, u].

    Scans the re-rooted path up to and including the first index where A > u.
    Returns the smoothed per-path crossing probability (exact indicator when
    the bridge correction is off) and a flag for paths whose scan window was
    cut by the horizon.
    """
    if u <= 0.0:
        raise ValueError("u must be positive")
    X, A = S.X, S.A
    dt = S.grid.dt
    over = np.flatnonzero(A > u)
    end = int(over[0]) if over.size else S.n_steps
    truncated = over.size == 0
    barrier, _ = _barrier_values(phi, A[: end + 1])
    if np.any(X[: end + 1] > barrier):
        return 1.0, truncated
    if not bridge:
        return 0.0, truncated
    p = bridge_crossing_prob(X[:end], X[1 : end + 1], barrier[:end], dt)
    log_surv = np.sum(np.log1p(-np.minimum(p, 1.0 - 1e-16)))
    return float(-np.expm1(log_surv)), truncated


# ---------------------------------------------------------------------------
# small-ensemble embedding (the engine mirrors this path for desk scale)
# ---------------------------------------------------------------------------


@dataclass
class EmbedSample:
    """Weighted sample of the embedded values with its diagnostics."""

    x: np.ndarray
    x_raw: np.ndarray
    a: np.ndarray
    weights: np.ndarray
    truncated: np.ndarray
    truncated_fraction: float
    defect_barrier: float
    defect_reciprocal: float
    sweep_fraction: float
    n_clamped: int

    @property
    def supported_identity(self) -> str:
        return "x=phi(a)" if self.defect_barrier <= self.defect_reciprocal else "x=1/phi(a)"


def embed(
    paths: Sequence[SigmaPath],
    weights: np.ndarray,
    law: TargetLaw,
    *,
    bridge: bool = True,
    bridge_uniforms: Sequence[np.ndarray] | None = None,
    sweep_uniforms: Sequence[np.ndarray] | None = None,
    n_quad: int | None = None,
    kappa: float = 4.0,
) -> EmbedSample:
    """Stop every re-rooted path at the law's barrier and collect the values.

    The returned sample uses the crossing value; x_raw keeps the grid value at
    the stop for the crossing-identity diagnostics, which are recorded against
    both candidate identities (barrier and reciprocal-barrier).  Sweep-stopped
    paths (sub-resolution startup race) have no grid crossing value and are
    excluded from the defect diagnostics; their share is reported.
    """
    phi_nu = phi_from_psi(psi(law, n_quad))
    sweep = SweepCorrection(law=law, phi_nu=phi_nu, kappa=kappa) if bridge else None
    xs, raws, aa, trunc = [], [], [], []
    n_clamped = 0
    n_sweep = 0
    for i, S in enumerate(paths):
        u = bridge_uniforms[i] if bridge_uniforms is not None else None
        su = sweep_uniforms[i] if sweep_uniforms is not None else None
        out = stop_T_phi(S, phi_nu, bridge=bridge, bridge_uniforms=u,
                         sweep=sweep, sweep_uniforms=su)
        xs.append(out.x_at_stop)
        raws.append(out.x_raw)
        aa.append(out.a_at_stop)
        trunc.append(out.truncated)
        n_clamped += out.barrier_clamped
        n_sweep += out.sweep_stopped
    x = np.asarray(xs)
    x_raw = np.asarray(raws)
    a = np.asarray(aa)
    truncated = np.asarray(trunc, dtype=bool)
    w = np.asarray(weights, dtype=np.float64)
    ok = ~truncated
    tf = float(np.sum(w[truncated]) / np.sum(w)) if w.size else 0.0
    raw_ok = ok & ~np.isnan(x_raw)
    defects = _crossing_defects(x_raw[raw_ok], a[raw_ok], w[raw_ok], phi_nu)
    return EmbedSample(
        x=x[ok], x_raw=x_raw[ok], a=a[ok], weights=w[ok], truncated=truncated,
        truncated_fraction=tf, defect_barrier=defects[0], defect_reciprocal=defects[1],
        sweep_fraction=float(n_sweep / max(1, len(paths))), n_clamped=n_clamped,
    )


def _crossing_defects(x_raw, a, w, phi_nu) -> tuple[float, float]:
    """Weighted mean absolute defect of both candidate crossing identities."""
    if x_raw.size == 0:
        return np.nan, np.nan
    bar = phi_nu(a)
    wsum = np.sum(w)
    d1 = float(np.sum(w * np.abs(x_raw - bar)) / wsum)
    with np.errstate(divide="ignore"):
        recip = np.where(bar > 0.0, 1.0 / bar, np.inf)
    d2 = float(np.sum(w * np.abs(x_raw - recip)) / wsum)
    return d1, d2


# ---------------------------------------------------------------------------
# binned conditional mean and the tail self-consistency curve
# ---------------------------------------------------------------------------


@dataclass
class LambdaBinned:
    edges: np.ndarray
    lam: np.ndarray
    bin_se: np.ndarray
    n_empty: int
    x_grid: np.ndarray
    curve: np.ndarray  # exp(-int_0^x dz / lam(z)) on x_grid


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, q: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    levels = (cw - 0.5 * weights[order]) / cw[-1]
    return np.interp(q, levels, v)


def conditional_lambda(
    a_samples: np.ndarray,
    x_samples: np.ndarray,
    weights: np.ndarray | None = None,
    n_bins: int = 25,
    n_grid: int = 400,
) -> LambdaBinned:
    """Equal-mass-binned estimate of the conditional mean of X given A.

    Also accumulates the implied tail curve exp(-int_0^x dz / lambda(z)) by
    trapezoid integration of 1 / lambda interpolated between bin midpoints,
    for comparison against the weighted empirical tail of A.
    """
    if n_bins < 5:
        raise ValueError("need at least 5 bins")
    a = np.asarray(a_samples, dtype=np.float64)
    x = np.asarray(x_samples, dtype=np.float64)
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=np.float64)
    if not (a.size == x.size == w.size and a.size > 0):
        raise ValueError("samples and weights must have equal positive length")
    edges = _weighted_quantile(a, w, np.linspace(0.0, 1.0, n_bins + 1))
    edges[0] = min(edges[0], a.min())
    edges[-1] = max(edges[-1], a.max())
    idx = np.clip(np.searchsorted(edges, a, side="right") - 1, 0, n_bins - 1)
    lam = np.full(n_bins, np.nan)
    se = np.full(n_bins, np.nan)
    n_empty = 0
    for b in range(n_bins):
        sel = idx == b
        wsum = np.sum(w[sel])
        if wsum <= 0.0:
            n_empty += 1
            continue
        mu = np.sum(w[sel] * x[sel]) / wsum
        lam[b] = mu
        se[b] = np.sqrt(np.sum((w[sel] * (x[sel] - mu)) ** 2)) / wsum
    mids = 0.5 * (edges[:-1] + edges[1:])
    good = ~np.isnan(lam)
    x_grid = np.linspace(0.0, float(edges[-1]), n_grid)
    lam_on_grid = np.interp(x_grid, mids[good], lam[good])
    with np.errstate(divide="ignore"):
        inv = np.where(lam_on_grid > 0.0, 1.0 / lam_on_grid, np.inf)
    dx = np.diff(x_grid)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (inv[:-1] + inv[1:]) * dx)])
    return LambdaBinned(edges=edges, lam=lam, bin_se=se, n_empty=n_empty,
                        x_grid=x_grid, curve=np.exp(-integral))
