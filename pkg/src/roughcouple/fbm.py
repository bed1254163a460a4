"""Two-sided Wiener sampling and the fractional motion it drives.

The fractional path is realised through its moving-average representation
against a two-sided Wiener path, split into the past component D (smooth
away from the window origin) and the innovation Z (a Liouville-type rough
term).  All kernel integrals are exact per cell against piecewise-uniform
increment densities: the kernels are singular at the evaluation time, so
pointwise kernel evaluation at cell edges is never used.

The normalisation constant is calibrated on the discrete model itself so
that Var(X_1) = 1; with that choice E|X_t - X_s|^2 = |t - s|^(2H) holds up
to discretisation bias and the covariance oracles are closed-form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .grid import GridPath, TimeGrid, ekgamma_norm, write_csv


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: (seed, stream) -> independent reproducible stream."""
    return np.random.Generator(
        np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, stream], dtype=np.uint64))
    )


def geometric_past_times(t_past: float, h: float, cells_per_octave: int = 4) -> np.ndarray:
    """Past nodes -t_past = p_0 < ... < p_M = 0, geometric away from 0.

    Spacing matches the future cell width h near the origin and widens by
    octaves (ratio 2, subdivided cells_per_octave times) into the past.
    """
    if t_past <= h:
        raise ValueError("past window must exceed one future cell")
    ratio = 2.0 ** (1.0 / cells_per_octave)
    ts = [0.0, -h]
    while ts[-1] > -t_past:
        ts.append(max(ts[-1] * ratio, -t_past))
        if len(ts) > 100000:
            raise RuntimeError("past grid construction runaway")
    return np.array(ts[::-1])


@dataclass
class WienerPath:
    """A two-sided Wiener sample: geometric past cells plus a uniform future.

    Increments are independent centred Gaussians with variance equal to the
    cell width; the path is their cumulative sum with W(0) = 0.
    """

    past_times: np.ndarray          # (M+1,) ascending, last entry 0.0
    past_incr: np.ndarray           # (M, d)
    h: float                        # future cell width
    future_incr: np.ndarray         # (N, d)
    seed: Optional[int] = None

    @property
    def d(self) -> int:
        return self.past_incr.shape[1]

    @property
    def n_future(self) -> int:
        return self.future_incr.shape[0]

    @property
    def t_past(self) -> float:
        return -float(self.past_times[0])

    def future_values(self) -> np.ndarray:
        """W on the future nodes 0, h, 2h, ...; shape (N+1, d)."""
        out = np.zeros((self.n_future + 1, self.d))
        np.cumsum(self.future_incr, axis=0, out=out[1:])
        return out

    def past_values(self) -> np.ndarray:
        """W on the past nodes, anchored at W(0) = 0; shape (M+1, d)."""
        out = np.zeros((self.past_times.size, self.d))
        out[:-1] = -np.cumsum(self.past_incr[::-1], axis=0)[::-1]
        return out

    def window_grid(self, start_cell: int, level: int) -> TimeGrid:
        """Dyadic view [start*h, start*h + 2^level h] of the future lattice."""
        span = self.h * 2**level
        return TimeGrid(level, origin=start_cell * self.h, span=span)

    def window_path(self, start_cell: int, level: int) -> GridPath:
        """W - W(window start) on a dyadic future window."""
        n = 2**level
        if start_cell + n > self.n_future:
            raise ValueError("window extends past the sampled future")
        incr = self.future_incr[start_cell : start_cell + n]
        vals = np.zeros((n + 1, self.d))
        np.cumsum(incr, axis=0, out=vals[1:])
        return GridPath(self.window_grid(start_cell, level), vals)

    def with_future(self, future_incr: np.ndarray) -> "WienerPath":
        return WienerPath(self.past_times, self.past_incr, self.h, future_incr, self.seed)


def sample_wiener(
    seed,
    t_past: float = 2.0**10,
    t_max: float = 1.0,
    level: int = 9,
    d: int = 1,
    cells_per_octave: int = 4,
) -> WienerPath:
    """Fresh two-sided Wiener sample, deterministic given the seed.

    level sets the future resolution: 2^level cells per unit time.
    """
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(int(seed))
    h = 2.0**-level
    past_times = geometric_past_times(t_past, h, cells_per_octave)
    widths = np.diff(past_times)
    past_incr = rng.standard_normal((widths.size, d)) * np.sqrt(widths)[:, None]
    n_future = int(round(t_max / h))
    future_incr = rng.standard_normal((n_future, d)) * math.sqrt(h)
    return WienerPath(
        past_times,
        past_incr,
        h,
        future_incr,
        seed=None if isinstance(seed, np.random.Generator) else int(seed),
    )


# ---------------------------------------------------------------------------
# exact per-cell kernel integrals


def _cell_weights_value(t: np.ndarray, a: np.ndarray, b: np.ndarray, tau: float, H: float):
    """Unit-density weights int_cell [(t+tau-r)^(H-1/2) - (-r)_+^(H-1/2)] dr.

    t: evaluation offsets (>O), a/b: cell edges (absolute time <= tau).
    Cells never straddle 0.
    """
    hp = H + 0.5
    tt = t[:, None] + tau
    lead = ((tt - a[None, :]) ** hp - (tt - b[None, :]) ** hp) / hp
    neg = (np.maximum(-a, 0.0) ** hp - np.maximum(-b, 0.0) ** hp) / hp
    return lead - neg[None, :]


def _cell_weights_deriv(t: np.ndarray, a: np.ndarray, b: np.ndarray, tau: float, H: float):
    """Unit-density weights for the derivative kernel (exact antiderivative)."""
    hm = H - 0.5
    tt = t[:, None] + tau
    return (tt - a[None, :]) ** hm - (tt - b[None, :]) ** hm


def liouville_weights(level_cells: int, h: float, H: float) -> np.ndarray:
    """Lag weights of the innovation kernel on a uniform lattice.

    weights[m] = int over one cell at lag m of (t-r)^(H-1/2) dr / h; the
    innovation at node i is alpha_H * sum_k incr[k] / h * weights[i-1-k].
    """
    hp = H + 0.5
    m = np.arange(level_cells, dtype=float)
    return (h**hp) * ((m + 1.0) ** hp - m**hp) / hp


def liouville_transform(values_incr: np.ndarray, h: float, H: float, alpha_H: float) -> np.ndarray:
    """alpha_H int_0^t (t-r)^(H-1/2) dw_r on the nodes of a uniform lattice."""
    from scipy.signal import convolve

    n, d = values_incr.shape
    w = liouville_weights(n, h, H)
    out = np.zeros((n + 1, d))
    for j in range(d):
        out[1:, j] = convolve(values_incr[:, j] / h, w, method="auto")[:n]
    return alpha_H * out


def dx_plus(w_plus: GridPath, H: float, alpha_H: float) -> GridPath:
    """The Liouville transform of a forward path (vanishing at its origin)."""
    if np.any(np.abs(w_plus.values[0]) > 0):
        raise ValueError("forward path must vanish at the window origin")
    incr = np.diff(w_plus.values, axis=0)
    vals = liouville_transform(incr, w_plus.grid.h, H, alpha_H)
    return GridPath(w_plus.grid, vals)


# ---------------------------------------------------------------------------
# normalisation


@lru_cache(maxsize=64)
def _alpha_cached(H: float, level: int, t_past: float, cells_per_octave: int) -> float:
    h = 2.0**-level
    edges = geometric_past_times(t_past, h, cells_per_octave)
    widths = np.diff(edges)
    t1 = np.array([1.0])
    kappa = _cell_weights_value(t1, edges[:-1], edges[1:], 0.0, H)[0]
    var_past = float(np.sum(kappa**2 / widths))
    w = liouville_weights(int(round(1.0 / h)), h, H)
    var_future = float(np.sum(w**2) / h)
    return 1.0 / math.sqrt(var_past + var_future)


def alpha_for_unit_variance(
    H: float, level: int, t_past: float = 2.0**10, cells_per_octave: int = 4
) -> float:
    """Normalisation: exact summation of squared kernel cell-integrals at t = 1.

    Chosen so that the discrete model has Var(X_1) = 1, which makes the
    standard covariance identities closed-form test oracles.
    """
    if not (1 / 3 < H < 0.5):
        raise ValueError("Hurst parameter must lie in (1/3, 1/2)")
    return _alpha_cached(float(H), int(level), float(t_past), int(cells_per_octave))


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class FbmScenario:
    """A Wiener sample with its derived fractional quantities on [0, t_max]."""

    w: WienerPath
    H: float
    alpha_H: float
    X: GridPath
    D: GridPath
    Z: GridPath
    dprime_t: np.ndarray
    dprime: np.ndarray
    origin_shift: float = 0.0
    truncation_std: float = 0.0

    def d_singular_norm(self, gamma: float) -> float:
        """sup_t t^(1-gamma) |D'(t)| over the sampled positive times."""
        return ekgamma_norm(self.dprime_t, [self.dprime], gamma).value

    def export(self, directory) -> None:
        import os

        os.makedirs(directory, exist_ok=True)
        for name, p in (("x", self.X), ("d", self.D), ("z", self.Z)):
            p.to_csv(os.path.join(directory, f"{name}.csv"))
        w_nodes = np.concatenate(
            [self.w.past_times[:-1], self.X.grid.origin + self.X.grid.points]
        )
        w_vals = np.vstack([self.w.past_values()[:-1], self.w.future_values()])
        write_csv(
            os.path.join(directory, "w.csv"),
            ["t"] + [f"w{i+1}" for i in range(self.w.d)],
            np.column_stack([w_nodes, w_vals]),
        )
        write_csv(
            os.path.join(directory, "dprime.csv"),
            ["t"] + [f"d{i+1}" for i in range(self.w.d)],
            np.column_stack([self.dprime_t, self.dprime]),
        )
        meta = {
            "H": self.H,
            "alpha_H": self.alpha_H,
            "seed": self.w.seed,
            "t_past": self.w.t_past,
            "h": self.w.h,
            "truncation_std": self.truncation_std,
        }
        with open(os.path.join(directory, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def fbm_from_wiener(w: WienerPath, H: float, warn_tol: float = 0.05) -> FbmScenario:
    """Split construction X = D + Z on the future window of w.

    D integrates the difference kernel over the past cells; Z is the
    Liouville transform of the future increments.  X is literally the sum
    of the two arrays, so the decomposition identity is exact by
    construction.
    """
    if not (1 / 3 < H < 0.5):
        raise ValueError("Hurst parameter must lie in (1/3, 1/2)")
    level = int(round(-math.log2(w.h)))
    n = w.n_future
    span = n * w.h
    grid_level = int(round(math.log2(n)))
    if 2**grid_level != n:
        raise ValueError("future window must hold a dyadic number of cells")
    grid = TimeGrid(grid_level, 0.0, span)
    alpha_H = alpha_for_unit_variance(H, level, w.t_past, _octaves_of(w))

    t = grid.points
    edges = w.past_times
    widths = np.diff(edges)
    dens = w.past_incr / widths[:, None]
    kappa = _cell_weights_value(t[1:], edges[:-1], edges[1:], 0.0, H)
    D_vals = np.zeros((t.size, w.d))
    D_vals[1:] = alpha_H * kappa @ dens
    Z_vals = liouville_transform(w.future_incr, w.h, H, alpha_H)
    X_vals = D_vals + Z_vals

    dprime_t = t[1:]
    kprime = _cell_weights_deriv(dprime_t, edges[:-1], edges[1:], 0.0, H)
    dprime = alpha_H * kprime @ dens

    # truncation: the discarded tail of the derivative kernel
    tail_var = alpha_H**2 * (H - 0.5) ** 2 * (w.t_past) ** (2 * H - 2) / (2 - 2 * H)
    tstd = math.sqrt(tail_var)
    scen = FbmScenario(
        w,
        H,
        alpha_H,
        GridPath(grid, X_vals),
        GridPath(grid, D_vals),
        GridPath(grid, Z_vals),
        dprime_t,
        dprime,
        truncation_std=tstd,
    )
    if tstd > warn_tol:
        import warnings

        warnings.warn(
            f"past window {w.t_past} leaves derivative truncation std {tstd:.2e}",
            stacklevel=2,
        )
    return scen


def _octaves_of(w: WienerPath) -> int:
    """Recover cells_per_octave from the stored geometric nodes."""
    ts = w.past_times
    if ts.size < 4:
        return 1
    r = ts[-3] / ts[-2]
    return max(1, int(round(1.0 / math.log2(abs(r)))))


def past_component(
    w: WienerPath,
    tau: float,
    t_grid: np.ndarray,
    drift_nodes: Optional[np.ndarray] = None,
    drift_values: Optional[np.ndarray] = None,
    alpha_H: Optional[float] = None,
    H: float = 0.4,
    coarsen_after: float = 8.0,
    anchor: bool = False,
):
    """Shifted past component D^(tau) and its derivative on positive offsets.

    Integrates the difference kernel over the full history up to tau: the
    geometric past cells plus the generated future cells below tau (merged
    into geometric blocks once they are older than coarsen_after, which
    leaves the Gaussian increments exact and only averages the slowly
    varying far kernel).  Optionally a cumulative drift (piecewise-linear
    nodes on the future lattice) is added to the Wiener increments.

    Returns (values, derivative) sampled on t_grid; t_grid must be > 0 for
    the derivative to be defined.  At t = 0 the component equals the
    current fractional level (not zero); anchor=True subtracts that value
    so the result starts at 0 and its increments drive the window
    equation directly.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid <= 0):
        raise ValueError("derivative of the past component rejected at t = 0")
    if alpha_H is None:
        alpha_H = alpha_for_unit_variance(H, int(round(-math.log2(w.h))), w.t_past, _octaves_of(w))
    n_tau = int(round(tau / w.h))
    if abs(n_tau * w.h - tau) > 1e-9:
        raise ValueError("tau must lie on the future lattice")
    if n_tau > w.n_future:
        raise ValueError("history not generated up to tau")

    # assemble history cells: (edges ascending, increments)
    edges = [w.past_times]
    incs = [w.past_incr]
    if n_tau > 0:
        fut_edges = np.arange(n_tau + 1) * w.h
        fut_inc = w.future_incr[:n_tau].copy()
        if drift_nodes is not None:
            fut_inc = fut_inc + _drift_cell_integrals(drift_nodes, drift_values, n_tau, w.h)
        fe, fi = _coarsen_history(fut_edges, fut_inc, tau, coarsen_after)
        edges.append(fe)
        incs.append(fi)
    all_edges = np.concatenate([edges[0]] + [e[1:] for e in edges[1:]]) if len(edges) > 1 else edges[0]
    all_inc = np.vstack(incs)
    widths = np.diff(all_edges)
    dens = all_inc / widths[:, None]

    kappa = _cell_weights_value(t_grid, all_edges[:-1], all_edges[1:], tau, H)
    kprime = _cell_weights_deriv(t_grid, all_edges[:-1], all_edges[1:], tau, H)
    values = alpha_H * kappa @ dens
    deriv = alpha_H * kprime @ dens
    if anchor:
        kappa0 = _cell_weights_value(np.array([0.0]), all_edges[:-1], all_edges[1:], tau, H)
        values = values - alpha_H * kappa0 @ dens
    return values, deriv


def piecewise_linear_cumint(knots: np.ndarray, values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cumulative integral of a piecewise-linear drift at the times t.

    Repeated knots encode jumps and contribute nothing to the integral;
    outside the knot range the drift is zero, so t is clamped.
    """
    knots = np.asarray(knots, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if knots.size != v.shape[0]:
        raise ValueError("drift knots/values mismatch")
    widths = np.diff(knots)
    areas = 0.5 * (v[1:] + v[:-1]) * widths[:, None]
    cum = np.zeros((knots.size, v.shape[1]))
    np.cumsum(areas, axis=0, out=cum[1:])
    tc = np.clip(np.asarray(t, dtype=float), knots[0], knots[-1])
    j = np.clip(np.searchsorted(knots, tc, side="right") - 1, 0, knots.size - 2)
    local = tc - knots[j]
    w = widths[j]
    frac = np.where(w > 0, local / np.where(w > 0, w, 1.0), 0.0)
    v_at = v[j] + frac[:, None] * (v[j + 1] - v[j])
    return cum[j] + 0.5 * (v[j] + v_at) * local[:, None]


def _drift_cell_integrals(nodes: np.ndarray, values: np.ndarray, n_cells: int, h: float) -> np.ndarray:
    """Integrals of a piecewise-linear drift over the first n_cells lattice cells."""
    edges = np.arange(n_cells + 1) * h
    cum = piecewise_linear_cumint(nodes, values, edges)
    return np.diff(cum, axis=0)


def _coarsen_history(edges: np.ndarray, inc: np.ndarray, tau: float, keep_within: float):
    """Merge cells older than keep_within into geometric blocks.

    Increments are summed (exact for the Gaussian path); only the slowly
    varying far kernel is averaged over the merged block.  Blocks are
    age-bucketed at 16 per octave, i.e. widths about age / 23.
    """
    ages = tau - edges[1:]  # age of each cell's right edge
    keep = ages <= keep_within
    if np.all(keep):
        return edges, inc
    split = int(np.argmax(keep))  # first kept cell
    old_e, old_i = edges[: split + 1], inc[:split]
    mid_age = tau - 0.5 * (old_e[1:] + old_e[:-1])
    bucket = np.floor(16.0 * np.log2(np.maximum(mid_age, keep_within))).astype(np.int64)
    starts = np.flatnonzero(np.concatenate([[True], np.diff(bucket) != 0]))
    merged_inc = np.add.reduceat(old_i, starts, axis=0)
    merged_e = np.concatenate([old_e[starts], old_e[-1:]])
    out_e = np.concatenate([merged_e, edges[split + 1 :]])
    out_i = np.vstack([merged_inc, inc[split:]])
    return out_e, out_i


def apply_drift(w: WienerPath, nodes: np.ndarray, values: np.ndarray) -> WienerPath:
    """Shift future increments by per-cell integrals of a drift; w unmodified.

    nodes/values describe a piecewise-linear drift supported within the
    future window (repeated knots encode jumps).
    """
    shift = _drift_cell_integrals(nodes, values, w.n_future, w.h)
    return w.with_future(w.future_incr + shift)


def small_lift_probability(
    eps: float,
    H: float,
    gamma: float,
    level: int = 8,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Monte Carlo estimate of P(|L(innovation lift)|_gamma <= eps).

    The positivity of this probability drives the hitting step's success
    frequency; no closed form is available, so it is measured.
    """
    from .roughpath import lift_piecewise_linear, rough_norm

    alpha_H = alpha_for_unit_variance(H, level)
    hits = 0
    for i in range(samples):
        rng = rng_stream(seed, i + 1)
        h = 2.0**-level
        incr = rng.standard_normal((2**level, 1)) * math.sqrt(h)
        z = liouville_transform(incr, h, H, alpha_H)
        rp = lift_piecewise_linear(GridPath(TimeGrid(level), z), min(level, 8))
        if rough_norm(rp, gamma) <= eps:
            hits += 1
    return hits / samples
