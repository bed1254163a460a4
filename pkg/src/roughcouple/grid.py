"""Dyadic time grids, increment operators and Hoelder-type norms.

Paths live on uniform dyadic grids (2^n cells).  Norms over 1- and
2-increments are computed by exhaustive loops over grid pairs; the
supremum over triples (s, u, t) needed by the cocycle operator and the
discrete sewing inequality is evaluated with a vectorised sweep over the
middle point.  Exhaustive evaluation is the default up to moderate
levels; for larger grids a strided pair subsample is used and the result
is flagged as a lower bound.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Above this many pair entries holder-type norms fall back to a strided
# subsample and report a lower bound.
_MAX_DENSE_PAIRS = (2**12 + 1) ** 2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform dyadic grid: 2^level cells on [origin, origin + span]."""

    level: int
    origin: float = 0.0
    span: float = 1.0

    def __post_init__(self):
        if self.level < 1:
            raise ValueError(f"grid level must be >= 1, got {self.level}")
        if not self.span > 0:
            raise ValueError(f"grid span must be positive, got {self.span}")

    @property
    def n_cells(self) -> int:
        return 2**self.level

    @property
    def n_points(self) -> int:
        return self.n_cells + 1

    @property
    def h(self) -> float:
        """Cell width span * 2^-level."""
        return self.span / self.n_cells

    @property
    def points(self) -> np.ndarray:
        return self.origin + self.span * np.arange(self.n_points) / self.n_cells

    def refined(self, extra: int) -> "TimeGrid":
        return TimeGrid(self.level + extra, self.origin, self.span)

    def index_of(self, t: float) -> int:
        i = round((t - self.origin) / self.h)
        if abs(self.origin + i * self.h - t) > 1e-9 * max(1.0, self.span):
            raise ValueError(f"time {t} is not a grid point")
        return int(i)


class GridPath:
    """A d-dimensional path sampled on a TimeGrid.

    Values are stored as a (n_points, d) float array; scalar input is
    promoted to d = 1.
    """

    def __init__(self, grid: TimeGrid, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.n_points:
            raise ValueError(
                f"expected {grid.n_points} samples, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        self.grid = grid
        self.values = values

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "GridPath":
        vals = np.stack([np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.points])
        return cls(grid, vals)

    def restrict(self, level: int) -> "GridPath":
        """Subsample to a coarser dyadic level of the same window."""
        if level > self.grid.level:
            raise ValueError("can only restrict to a coarser level")
        stride = 2 ** (self.grid.level - level)
        return GridPath(
            TimeGrid(level, self.grid.origin, self.grid.span),
            self.values[::stride],
        )

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def to_csv(self, path) -> None:
        write_csv(path, ["t"] + [f"x{i+1}" for i in range(self.d)],
                  np.column_stack([self.grid.points, self.values]))

    @classmethod
    def read_csv(cls, path, grid: TimeGrid) -> "GridPath":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if not np.allclose(rows[:, 0], grid.points):
            raise ValueError("CSV times do not match the grid")
        return cls(grid, rows[:, 1:])


def write_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    """CSV writer used across the package: 17 significant digits."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.17g}" for v in r])


@dataclass
class Increment2:
    """2-index increments g_{st} on grid pairs; trailing axes carry values.

    data has shape (n_points, n_points) + value_shape; only s <= t entries
    are meaningful and the diagonal vanishes.
    """

    grid: TimeGrid
    data: np.ndarray

    def __post_init__(self):
        n = self.grid.n_points
        if self.data.shape[:2] != (n, n):
            raise ValueError("increment table does not match the grid")

    @property
    def value_shape(self):
        return self.data.shape[2:]

    def magnitudes(self) -> np.ndarray:
        """Euclidean magnitude per pair, shape (n_points, n_points)."""
        extra = tuple(range(2, self.data.ndim))
        return np.sqrt(np.sum(self.data**2, axis=extra)) if extra else np.abs(self.data)


class Increment3:
    """Lazy 3-index increments (delta g)_{sut} = g_st - g_su - g_ut."""

    def __init__(self, source: Increment2):
        self.source = source
        self.grid = source.grid

    def value(self, i: int, k: int, j: int) -> np.ndarray:
        g = self.source.data
        return g[i, j] - g[i, k] - g[k, j]

    def dense(self) -> np.ndarray:
        """Materialise all triples; only for small grids."""
        if self.grid.n_points > 2**7 + 1:
            raise MemoryError("dense triple table is restricted to level <= 7")
        return _dense_triples(self.source.data)

    def max_abs(self) -> float:
        return triple_sweep(self.source)[0].max() if self.grid.n_points > 2 else 0.0


def _dense_triples(g: np.ndarray) -> np.ndarray:
    n = g.shape[0]
    out = np.zeros((n, n, n) + g.shape[2:])
    for k in range(n):
        out[:, k, :] = g - g[:, k][:, None] - g[k, :][None, :]
    return out


def delta1(f: GridPath) -> Increment2:
    """(delta f)_{st} = f_t - f_s on every grid pair."""
    v = f.values
    return Increment2(f.grid, v[None, :, :] - v[:, None, :])


def delta2(g: Increment2) -> Increment3:
    """The cocycle (delta g)_{sut} = g_st - g_su - g_ut, evaluated lazily."""
    return Increment3(g)


@dataclass
class NormReport:
    """A computed supremum together with the pair/triple attaining it."""

    value: float
    arg_pair: tuple
    lower_bound: bool = False

    def __float__(self):
        return self.value


def _pair_weights(times: np.ndarray, mu: float) -> np.ndarray:
    dt = times[None, :] - times[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dt > 0, dt, np.inf) ** mu
    return w


def _interval_slice(grid: TimeGrid, interval) -> tuple[int, int]:
    if interval is None:
        return 0, grid.n_points - 1
    a, b = interval
    ia, ib = grid.index_of(a), grid.index_of(b)
    if ib <= ia:
        raise ValueError("grid too small: subinterval needs at least 2 points")
    return ia, ib


def holder_norm(g: Increment2, mu: float, interval=None, stride: int = 1) -> NormReport:
    """sup over grid pairs s < t of |g_st| / |t-s|^mu, with the maximiser.

    stride > 1 evaluates a pair subsample only and flags the report as a
    lower bound (used beyond the exhaustive-level cutoff).
    """
    if mu <= 0:
        raise ValueError("Hoelder exponent must be positive")
    ia, ib = _interval_slice(g.grid, interval)
    times = g.grid.points[ia : ib + 1 : stride]
    if times.size < 2:
        raise ValueError("grid too small")
    mags = g.magnitudes()[ia : ib + 1 : stride, ia : ib + 1 : stride]
    ratio = mags / _pair_weights(times, mu)
    np.nan_to_num(ratio, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
    flat = int(np.argmax(ratio))
    i, j = np.unravel_index(flat, ratio.shape)
    return NormReport(float(ratio[i, j]), (times[i], times[j]), stride > 1)


def pick_stride(grid: TimeGrid, value_size: int = 1) -> int:
    """Stride keeping the dense pair table within the exhaustive budget."""
    stride = 1
    while (grid.n_points // stride + 1) ** 2 * value_size > _MAX_DENSE_PAIRS:
        stride *= 2
    return stride


def singular_norm(
    g: Increment2, alpha: float, mu: float, beta: float, interval=None
) -> NormReport:
    """Two-branch singular Hoelder norm of a 2-increment.

    max( sup |g_st|/|t-s|^alpha , sup_{s>0} |g_st| / (|t-s|^mu s^{beta-1}) ),
    with s measured from the grid origin; the singular branch starts at the
    first strictly positive grid point.  beta = 1 collapses the weight to the
    plain mu-Hoelder ratio.
    """
    if not (0 < alpha <= 1 and mu >= alpha and 0 < beta <= 1):
        raise ValueError("need 0 < alpha <= 1, mu >= alpha, beta in (0, 1]")
    ia, ib = _interval_slice(g.grid, interval)
    times = g.grid.points[ia : ib + 1]
    mags = g.magnitudes()[ia : ib + 1, ia : ib + 1]

    with np.errstate(divide="ignore", invalid="ignore"):
        plain = mags / _pair_weights(times, alpha)
        np.nan_to_num(plain, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
        s_rel = times - g.grid.origin
        s_weight = np.where(s_rel > 0, s_rel, np.inf) ** (beta - 1.0)
        sing = mags / (_pair_weights(times, mu) * s_weight[:, None])
        np.nan_to_num(sing, copy=False, nan=0.0, posinf=0.0, neginf=0.0)

    i1, j1 = np.unravel_index(int(np.argmax(plain)), plain.shape)
    i2, j2 = np.unravel_index(int(np.argmax(sing)), sing.shape)
    if plain[i1, j1] >= sing[i2, j2]:
        return NormReport(float(plain[i1, j1]), (times[i1], times[j1]))
    return NormReport(float(sing[i2, j2]), (times[i2], times[j2]))


def triple_sweep(g: Increment2, interval=None) -> tuple[np.ndarray, np.ndarray]:
    """max_u |(delta g)_{sut}| for every pair s < t, plus the pair times.

    The weights of every triple norm used here depend on (s, t) only, so
    a running maximum over the middle point suffices; the sweep is
    vectorised over the (s, t) plane for each u.
    """
    ia, ib = _interval_slice(g.grid, interval)
    mags_shape_axes = tuple(range(2, g.data.ndim))
    data = g.data[ia : ib + 1, ia : ib + 1]
    n = data.shape[0]
    best = np.zeros((n, n))
    for u in range(1, n - 1):
        block = (
            data[:u, u + 1 :]
            - data[:u, u][:, None]
            - data[u, u + 1 :][None, :]
        )
        if mags_shape_axes:
            mag = np.sqrt(np.sum(block**2, axis=tuple(range(2, block.ndim))))
        else:
            mag = np.abs(block)
        np.maximum(best[:u, u + 1 :], mag, out=best[:u, u + 1 :])
    return best, g.grid.points[ia : ib + 1]


def triple_norm(
    g: Increment2, alpha: float, mu: float, beta: float, interval=None
) -> NormReport:
    """Singular Hoelder norm of (delta g) over all grid triples."""
    best, times = triple_sweep(g, interval)
    with np.errstate(divide="ignore", invalid="ignore"):
        plain = best / _pair_weights(times, alpha)
        np.nan_to_num(plain, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
        s_rel = times - g.grid.origin
        s_weight = np.where(s_rel > 0, s_rel, np.inf) ** (beta - 1.0)
        sing = best / (_pair_weights(times, mu) * s_weight[:, None])
        np.nan_to_num(sing, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
    i1, j1 = np.unravel_index(int(np.argmax(plain)), plain.shape)
    i2, j2 = np.unravel_index(int(np.argmax(sing)), sing.shape)
    if plain[i1, j1] >= sing[i2, j2]:
        return NormReport(float(plain[i1, j1]), (times[i1], times[j1]))
    return NormReport(float(sing[i2, j2]), (times[i2], times[j2]))


def weighted_past_norm(x: GridPath, gamma: float) -> NormReport:
    """sup over pairs in the past window of |x_t - x_s| / (|t-s|^g (1+|t|+|s|)^1/2).

    The window is the path's own (finite) grid, so the value is a lower
    bound of the supremum over the whole half line.
    """
    times = x.grid.points
    if times.size < 2:
        raise ValueError("empty window")
    dmat = delta1(x).magnitudes()
    dt = times[None, :] - times[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(dt > 0, dt, np.inf) ** gamma * np.sqrt(
            1.0 + np.abs(times)[None, :] + np.abs(times)[:, None]
        )
    ratio = dmat / weight
    np.nan_to_num(ratio, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
    i, j = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    return NormReport(float(ratio[i, j]), (times[i], times[j]), lower_bound=True)


def ekgamma_norm(
    t: np.ndarray, derivatives: Sequence[np.ndarray], gamma: float
) -> NormReport:
    """Weighted-derivative norm max_l sup_t t^(l-gamma) |f^(l)(t)| on (0, 1].

    derivatives[l-1] holds samples of the l-th derivative on the strictly
    positive times t.  Samples are supplied, not computed, because the
    integrands of interest have closed derivative forms and the t -> 0
    weight would be corrupted by finite differences.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or np.any(t <= 0):
        raise ValueError("derivative samples must live on strictly positive times")
    best, arg = 0.0, (0.0, 0)
    for order, samples in enumerate(derivatives, start=1):
        samples = np.asarray(samples, dtype=float)
        if samples.shape[0] != t.shape[0]:
            raise ValueError(f"missing derivative samples for order {order}")
        mags = samples if samples.ndim == 1 else np.linalg.norm(samples, axis=1)
        weighted = t ** (order - gamma) * np.abs(mags)
        i = int(np.argmax(weighted))
        if weighted[i] > best:
            best, arg = float(weighted[i]), (float(t[i]), order)
    return NormReport(best, arg, lower_bound=True)


def singular_step_max(
    G: Increment2, alpha: float, mu1: float, lam: float, interval=None
) -> float:
    """Consecutive-cell maximum M_lambda^{alpha,mu1}[G] of the sewing bound."""
    ia, ib = _interval_slice(G.grid, interval)
    times = G.grid.points[ia : ib + 1]
    steps = G.data[np.arange(ia, ib), np.arange(ia + 1, ib + 1)]
    mags = np.abs(steps) if steps.ndim == 1 else np.sqrt(
        np.sum(steps**2, axis=tuple(range(1, steps.ndim)))
    )
    h = np.diff(times)
    first = np.max(mags / h**alpha)
    s_rel = times[:-1] - G.grid.origin
    inner = s_rel > 0
    inner[0] = False
    second = np.max(mags[inner] / (h[inner] ** mu1 * s_rel[inner] ** (lam - 1.0))) \
        if np.any(inner) else 0.0
    return float(max(first, second))


@dataclass
class SewingReport:
    """Both sides of the discrete singular sewing inequality and their ratio."""

    lhs: float
    rhs: float
    ratio: float
    step_term: float
    triple_term: float
    level: int
    violation: bool = False


def sewing_check(
    G: Increment2, alpha: float, lam: float, mu1: float, mu2: float, interval=None
) -> SewingReport:
    """Evaluate N[G] <= c { M[G] + N[delta G] } on the grid and report LHS/RHS.

    The inequality holds with a constant independent of the grid level; the
    check measures the achieved ratio (0/0 counts as ratio 0, RHS = 0 with
    LHS > 0 is flagged as a violation).
    """
    if not (0 < alpha <= lam <= 1 and mu1 >= 1 and mu2 > 1):
        raise ValueError("need 0 < alpha <= lambda <= 1, mu1 >= 1, mu2 > 1")
    lhs = singular_norm(G, alpha, min(mu1, mu2), lam, interval).value
    step = singular_step_max(G, alpha, mu1, lam, interval)
    trip = triple_norm(G, alpha, mu2, lam, interval).value
    rhs = step + trip
    if rhs == 0.0:
        return SewingReport(lhs, rhs, 0.0, step, trip, G.grid.level, lhs > 0)
    return SewingReport(lhs, rhs, lhs / rhs, step, trip, G.grid.level)
