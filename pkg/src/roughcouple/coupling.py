"""The 3-step coupling scheme and the coupling-time tail estimator.

One replica is an isolated state machine: two positions, one Wiener
history, and the drift history that separates the two noises.  Each
trial tries to (1) steer the positions together over one unit of time
through the linearised hitting system and a three-branch density
routing that preserves both Brownian marginals, (2) keep the paths glued
over doubling intervals by continuing the drift so the forward
fractional drift vanishes, and (3) wait long enough after a failure for
the drift's fractional shadow and the positions to settle.

Coalescence times (or censoring at the horizon) feed a product-limit
survival estimate whose doubled value bounds the distance to the
stationary law in total variation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm as normal_dist

from .fbm import (
    WienerPath,
    alpha_for_unit_variance,
    dx_plus,
    geometric_past_times,
    past_component,
    rng_stream,
)
from .fraccalc import (
    PastDrift,
    TransformConstants,
    admissibility_integral,
    calibrate_constants,
    fractional_derivative_map,
    h_transform,
    step2_drift,
)
from .grid import GridPath, TimeGrid, ekgamma_norm, write_csv
from .rde import (
    CutoffFunction,
    SolverBlowUp,
    VectorFieldPair,
    davie_solve,
    solve_hitting,
    solve_hitting_inverse,
)
from .roughpath import RoughPath, lift_piecewise_linear, lift_with_drift


@dataclass
class SchemeConfig:
    """Parameters of the 3-step scheme; ranges are validated on creation."""

    H: float = 0.4
    gamma: float = 0.35
    alpha: float = 0.10
    beta: float = 1.6
    varsigma: float = 1.3
    epsilon: float = 0.5
    K: float = 20.0
    C2_alpha_K: float = 1.0
    c2: Optional[float] = None
    c3: Optional[float] = None
    plateau: float = 200.0
    hit_tol: float = 5e-3
    level: int = 7
    m_xi: int = 33
    t_past: float = 2.0**10
    cells_per_octave: int = 4
    horizon: float = 200.0
    d: int = 1
    y_init: float = 2.0
    ytil_init: float = -2.0
    burn_in: float = 8.0
    coarsen_after: float = 4.0
    max_ell: int = 30
    seed: int = 0

    def __post_init__(self):
        if not (1 / 3 < self.H < 0.5):
            raise ValueError("H must lie in (1/3, 1/2)")
        if not (1 / 3 < self.gamma < self.H):
            raise ValueError("gamma must lie in (1/3, H)")
        if not (0 < self.alpha < self.H):
            raise ValueError("alpha must lie in (0, H)")
        if not self.beta > 1.0 / (1.0 - 2.0 * self.alpha):
            raise ValueError("beta must exceed 1/(1 - 2 alpha)")
        if not self.varsigma > 1.0:
            raise ValueError("varsigma must exceed 1")
        if not (0 < self.epsilon < 1):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.c2 is None:
            self.c2 = self.C2_alpha_K ** (1.0 / (2.0 * self.alpha))
        if self.c3 is None:
            self.c3 = max(2.0 * self.c2, 4.0)
        if self.c3 < 2.0 * self.c2:
            raise ValueError("c3 must be at least 2 c2")

    @property
    def h(self) -> float:
        return 2.0**-self.level

    @property
    def unit_cells(self) -> int:
        return 2**self.level

    def delta3(self, ell: int, k: int) -> float:
        """Waiting duration after a failure at attempt level ell of trial k."""
        return self.c3 * self.varsigma**k * 2.0 ** (self.beta * ell)


@dataclass
class TrialRecord:
    k: int
    tau_start: float
    admissible: bool
    adm_value: float
    step1: str                       # skip / blowup / miss / hit-<branch>
    branch: str
    fail_level: Optional[int]        # None when the trial glued to horizon
    delta3: float
    hit_gap: float
    gw_l2: float
    log_dens_fwd: float
    log_dens_bar: float
    step2_masses: list = field(default_factory=list)


@dataclass
class CouplingTrace:
    """Full record of one replica of the scheme."""

    config_seed: int
    replica: int
    trials: list
    tau_inf: Optional[float]
    censored: bool
    horizon: float
    pooled_w: Optional[np.ndarray] = None
    pooled_wt: Optional[np.ndarray] = None
    gw_segments: list = field(default_factory=list)

    @property
    def coupled(self) -> bool:
        return self.tau_inf is not None

    def export_csv(self, path) -> None:
        rows = []
        for t in self.trials:
            rows.append(
                [
                    t.k,
                    t.tau_start,
                    int(t.admissible),
                    {"skip": 0, "blowup": 1, "miss": 2}.get(t.step1, 3),
                    -1 if t.fail_level is None else t.fail_level,
                    t.delta3,
                ]
            )
        write_csv(path, ["k", "tau_km1", "admissible", "step1", "stepsucceeded_upto_ell", "delta3"], np.array(rows, dtype=float))


class CouplingContext:
    """Shared immutable machinery: fields, cutoff, constants, grids."""

    def __init__(self, vf: VectorFieldPair, cfg: SchemeConfig):
        if vf.dim != cfg.d:
            raise ValueError("vector field dimension does not match the config")
        self.vf = vf
        self.cfg = cfg
        self.phi = CutoffFunction(plateau=cfg.plateau, dim=cfg.d)
        self.alpha_H = alpha_for_unit_variance(
            cfg.H, cfg.level, cfg.t_past, cfg.cells_per_octave
        )
        self.consts = calibrate_constants(cfg.H, self.alpha_H)
        self.unit_grid = TimeGrid(cfg.level, 0.0, 1.0)
        # first-cell substitution nodes for drift-aware lifts
        self.t_nodes = self.unit_grid.points[1:]

    def window_grid(self, cells: int) -> TimeGrid:
        level = int(round(math.log2(cells)))
        if 2**level != cells:
            raise ValueError("window must hold a dyadic cell count")
        return TimeGrid(level, 0.0, cells * self.cfg.h)


class ReplicaState:
    """Mutable per-replica state: time, positions, noise and drift history."""

    def __init__(self, ctx: CouplingContext, replica: int, collect_increments=False):
        cfg = ctx.cfg
        self.ctx = ctx
        self.rng = rng_stream(cfg.seed, replica + 1)
        self.replica = replica
        past_times = geometric_past_times(cfg.t_past, cfg.h, cfg.cells_per_octave)
        widths = np.diff(past_times)
        past_incr = self.rng.standard_normal((widths.size, cfg.d)) * np.sqrt(widths)[:, None]
        self.w = WienerPath(past_times, past_incr, cfg.h, np.zeros((0, cfg.d)), seed=cfg.seed)
        self.tau_cells = 0
        self.Y = np.full(cfg.d, cfg.y_init, dtype=float)
        self.Ytil = np.full(cfg.d, cfg.ytil_init, dtype=float)
        self.glued = False
        # drift history: list of (start_cell, node_values (n+1, d))
        self.segments: list = []
        self.collect = collect_increments
        self.pooled_w: list = []
        self.pooled_wt: list = []

    # -- noise management ---------------------------------------------------

    def ensure_future(self, n_cells: int) -> None:
        have = self.w.n_future
        if n_cells > have:
            fresh = self.rng.standard_normal((n_cells - have, self.ctx.cfg.d)) * math.sqrt(
                self.ctx.cfg.h
            )
            self.w = self.w.with_future(np.vstack([self.w.future_incr, fresh]))

    def window_incr(self, start: int, cells: int) -> np.ndarray:
        self.ensure_future(start + cells)
        return self.w.future_incr[start : start + cells]

    # -- drift history ------------------------------------------------------

    def add_segment(self, start_cell: int, node_values: np.ndarray, kind: str) -> None:
        if np.any(np.abs(node_values) > 0):
            self.segments.append((start_cell, np.array(node_values), kind))

    def drift_nodes_until(self, cell: int):
        return assemble_drift_knots(self.segments, self.ctx.cfg.h, cell, self.ctx.cfg.d)

    def history_as_past_drift(self, origin_cell: int) -> Optional[PastDrift]:
        """History in coordinates relative to the origin, jumps as steep ramps.

        A drift segment that reaches the origin keeps its boundary value
        there (the artificial terminal jump to zero is dropped): the
        continuation operator's kernel is singular at the origin and a
        zero-width ramp there would defeat its substitution quadrature.
        """
        knots, vals = self.drift_nodes_until(origin_cell)
        if knots is None:
            return None
        if not np.any(np.abs(vals) > 0):
            return None
        h = self.ctx.cfg.h
        rel = np.minimum(knots - origin_cell * h, 0.0)
        if (
            rel.size >= 2
            and abs(rel[-1]) < 1e-12
            and abs(rel[-2] - rel[-1]) < 1e-12
            and not np.any(np.abs(vals[-1]) > 0)
            and np.any(np.abs(vals[-2]) > 0)
        ):
            rel, vals = rel[:-1], vals[:-1]
        ramp = 1e-7 * h
        kk, vv = [rel[0]], [vals[0]]
        for t, v in zip(rel[1:], vals[1:]):
            kk.append(max(t, kk[-1] + ramp))
            vv.append(v)
        shift = max(kk[-1], 0.0)
        kk = np.array(kk) - shift
        vv = np.vstack(vv)
        # thin long histories for the quadrature operators: the stored
        # continuation segments are smooth at the lattice scale, so a
        # strided piecewise-linear summary is accurate; the knots closest
        # to the origin are kept untouched (the kernel peaks there)
        max_knots = 2048
        if kk.size > max_knots:
            near = kk > -2.0
            far_idx = np.flatnonzero(~near)
            stride = max(1, int(math.ceil(far_idx.size / (max_knots - near.sum()))))
            keep = np.zeros(kk.size, dtype=bool)
            keep[near] = True
            keep[far_idx[::stride]] = True
            keep[0] = keep[-1] = True
            kk, vv = kk[keep], vv[keep]
        return PastDrift(kk, vv)

    def wtil_window_incr(self, start: int, cells: int) -> np.ndarray:
        """Drifted-side increments on a window: w plus per-cell drift integrals."""
        base = self.window_incr(start, cells).copy()
        h = self.ctx.cfg.h
        for seg_start, nodes, _kind in self.segments:
            n_nodes = nodes.shape[0]
            lo = max(start, seg_start)
            hi = min(start + cells, seg_start + n_nodes - 1)
            for c in range(lo, hi):
                i = c - seg_start
                base[c - start] += 0.5 * (nodes[i] + nodes[i + 1]) * h
        return base

    # -- fractional building blocks ------------------------------------------


def assemble_drift_knots(segments, h: float, cell: int, d: int):
    """Global drift knots on [0, cell h]; repeated knots encode jumps.

    Between segments the drift is identically zero; a segment cut off by
    the requested cell keeps its sampled values up to the cut and jumps
    to zero there.
    """
    if not segments:
        return None, None
    zero = np.zeros(d)
    end_t = cell * h
    eps = 1e-9 * h
    knots = [0.0]
    vals = [zero]
    for start, nodes, _kind in sorted(segments, key=lambda s: s[0]):
        t0 = start * h
        if t0 >= end_t - eps:
            continue
        n_keep = min(nodes.shape[0], cell - start + 1)
        if t0 > knots[-1] + eps:
            knots.append(t0)
            vals.append(zero)
        # jump (possibly of size zero) up to the segment's first value
        knots.append(max(t0, knots[-1]))
        vals.append(nodes[0])
        for i in range(1, n_keep):
            knots.append(t0 + i * h)
            vals.append(nodes[i])
        knots.append(knots[-1])
        vals.append(zero)
    if knots[-1] < end_t - eps:
        knots.append(end_t)
        vals.append(zero)
    return np.array(knots), np.vstack(vals)


def _first_cell_u_nodes(h: float, gamma: float, n: int = 64) -> np.ndarray:
    r = (np.arange(n) + 0.5) / n * h**gamma
    return r ** (1.0 / gamma)


def block_driver(
    state: ReplicaState,
    start: int,
    cells: int,
    drifted: bool,
    w_incr_override: Optional[np.ndarray] = None,
):
    """Rough driver of one dyadic window for one coordinate.

    Assembles the window innovation (Liouville transform of the window
    increments), the shifted past component of the corresponding Wiener
    history, and lifts their sum with the singular first cell handled by
    substitution quadrature.  Returns (RoughPath, h_values, h_deriv).
    """
    ctx = state.ctx
    cfg = ctx.cfg
    tau = start * cfg.h
    grid = ctx.window_grid(cells)
    if w_incr_override is not None:
        incr = w_incr_override
    elif drifted:
        incr = state.wtil_window_incr(start, cells)
    else:
        incr = state.window_incr(start, cells)
    vals = np.zeros((cells + 1, cfg.d))
    np.cumsum(incr, axis=0, out=vals[1:])
    z_path = dx_plus(GridPath(grid, vals), cfg.H, ctx.alpha_H)
    rp_z = lift_piecewise_linear(z_path)

    u_nodes = _first_cell_u_nodes(grid.h, cfg.gamma)
    t_grid = np.concatenate([grid.points[1:], u_nodes])
    if drifted:
        knots, vv = state.drift_nodes_until(start)
    else:
        knots, vv = None, None
    d_vals, d_deriv = past_component(
        state.w,
        tau,
        t_grid,
        drift_nodes=knots,
        drift_values=vv,
        alpha_H=ctx.alpha_H,
        H=cfg.H,
        coarsen_after=cfg.coarsen_after,
        anchor=True,
    )
    n_main = cells
    h_vals = np.vstack([np.zeros((1, cfg.d)), d_vals[:n_main]])
    h_deriv = d_deriv[:n_main]
    first_deriv = d_deriv[n_main:]
    rp = lift_with_drift(
        rp_z,
        GridPath(grid, h_vals),
        g_deriv=_SampledDeriv(u_nodes, first_deriv),
        gamma=cfg.gamma,
    )
    return rp, h_vals, h_deriv


class _SampledDeriv:
    """Adapter: derivative samples at the substitution nodes as a callable."""

    def __init__(self, u_nodes, samples):
        self.u = u_nodes
        self.samples = samples
        self._idx = 0

    def __call__(self, t):
        i = int(np.argmin(np.abs(self.u - t)))
        return self.samples[i]


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class AdmissibilityCheck:
    admissible: bool
    integral_value: float
    positions: float
    d_norm: float
    dt_norm: float

    @property
    def k_total(self) -> float:
        return self.positions + self.d_norm + self.dt_norm


def check_admissible(state: ReplicaState) -> AdmissibilityCheck:
    """Both admissibility conditions at the current trial origin."""
    ctx = state.ctx
    cfg = ctx.cfg
    tau = state.tau_cells * cfg.h
    hist = state.history_as_past_drift(state.tau_cells)
    if hist is None:
        integral = 0.0
        cond1 = True
    else:
        rep = admissibility_integral(hist, cfg.alpha, ctx.consts)
        integral = rep.value
        cond1 = rep.admissible
    t_grid = ctx.t_nodes
    _, d_plain = past_component(
        state.w, tau, t_grid, alpha_H=ctx.alpha_H, H=cfg.H, coarsen_after=cfg.coarsen_after
    )
    knots, vv = state.drift_nodes_until(state.tau_cells)
    _, d_drift = past_component(
        state.w, tau, t_grid, drift_nodes=knots, drift_values=vv,
        alpha_H=ctx.alpha_H, H=cfg.H, coarsen_after=cfg.coarsen_after,
    )
    d_norm = ekgamma_norm(t_grid, [d_plain], cfg.gamma).value
    dt_norm = ekgamma_norm(t_grid, [d_drift], cfg.gamma).value
    positions = float(np.linalg.norm(state.Y) + np.linalg.norm(state.Ytil))
    ok = cond1 and (positions + d_norm + dt_norm <= cfg.K)
    return AdmissibilityCheck(ok, integral, positions, d_norm, dt_norm)


# ---------------------------------------------------------------------------
# the coupling map and its inverse


@dataclass
class LambdaResult:
    g_x: np.ndarray          # (n+1, d) extracted fractional drift
    g_w: np.ndarray          # (n+1, d) forward Wiener drift at window nodes
    wtil_incr: np.ndarray    # (n, d) image-path increments
    blowup: bool = False


def _drift_to_increments(g_nodes: np.ndarray, h: float) -> np.ndarray:
    return 0.5 * (g_nodes[:-1] + g_nodes[1:]) * h


def _window_h_transform(state: ReplicaState, g_x: np.ndarray, negate_past: bool):
    """H(+-g-, g_X) evaluated at the window nodes (origin value by limit)."""
    ctx = state.ctx
    cfg = ctx.cfg
    hist = state.history_as_past_drift(state.tau_cells)
    if hist is not None and negate_past:
        hist = hist.scaled(-1.0)
    nodes = np.concatenate([[0.0], ctx.t_nodes])
    eval_t = np.concatenate([[cfg.h / 64.0], ctx.t_nodes])
    g_w = h_transform(hist, nodes, g_x, eval_t, ctx.consts, tol=1e-6, start_order=8)
    return g_w


def lambda_map(state: ReplicaState, w_incr: np.ndarray) -> LambdaResult:
    """Forward coupling map on one unit window.

    Solves the hitting system on the undrifted past component plus the
    candidate innovation lift, extracts the fractional drift, converts it
    into a Wiener drift through the concatenation transform and shifts the
    candidate.  A solver blow-up degrades to the identity map with the
    attempt recorded as failed.
    """
    ctx = state.ctx
    cfg = ctx.cfg
    grid = ctx.unit_grid
    vals = np.zeros((cfg.unit_cells + 1, cfg.d))
    np.cumsum(w_incr, axis=0, out=vals[1:])
    z_path = dx_plus(GridPath(grid, vals), cfg.H, ctx.alpha_H)
    rp_z = lift_piecewise_linear(z_path)
    tau = state.tau_cells * cfg.h
    d_vals, _ = past_component(
        state.w, tau, ctx.t_nodes, alpha_H=ctx.alpha_H, H=cfg.H,
        coarsen_after=cfg.coarsen_after, anchor=True,
    )
    h_full = np.vstack([np.zeros((1, cfg.d)), d_vals])
    h_incr = np.diff(h_full, axis=0)
    try:
        res = solve_hitting(
            ctx.vf, state.Y, state.Ytil, h_incr, rp_z, ctx.phi, cfg.m_xi
        )
    except SolverBlowUp:
        n = cfg.unit_cells
        zero = np.zeros((n + 1, cfg.d))
        return LambdaResult(zero, zero, w_incr.copy(), blowup=True)
    g_w = _window_h_transform(state, res.g_x, negate_past=False)
    wtil = w_incr + _drift_to_increments(g_w, cfg.h)
    return LambdaResult(res.g_x, g_w, wtil)


def lambda_inverse(
    state: ReplicaState,
    v_incr: np.ndarray,
    refine: bool = True,
    tol: float = 1e-9,
    max_iter: int = 8,
) -> LambdaResult:
    """Inverse coupling map: auxiliary-system start, fixed-point polish.

    The auxiliary system on the drifted past provides the initial drift
    guess; the polish iterates u <- v - int g_W(u) through the forward
    map, which pins the preimage to fixed-point accuracy and realises the
    drift-cancellation identity exactly.
    """
    ctx = state.ctx
    cfg = ctx.cfg
    grid = ctx.unit_grid
    vals = np.zeros((cfg.unit_cells + 1, cfg.d))
    np.cumsum(v_incr, axis=0, out=vals[1:])
    z_path = dx_plus(GridPath(grid, vals), cfg.H, ctx.alpha_H)
    rp_z = lift_piecewise_linear(z_path)
    tau = state.tau_cells * cfg.h
    knots, vv = state.drift_nodes_until(state.tau_cells)
    d_vals, _ = past_component(
        state.w, tau, ctx.t_nodes, drift_nodes=knots, drift_values=vv,
        alpha_H=ctx.alpha_H, H=cfg.H, coarsen_after=cfg.coarsen_after, anchor=True,
    )
    h_full = np.vstack([np.zeros((1, cfg.d)), d_vals])
    h_incr = np.diff(h_full, axis=0)
    try:
        res = solve_hitting_inverse(
            ctx.vf, state.Y, state.Ytil, h_incr, rp_z, ctx.phi, cfg.m_xi
        )
    except SolverBlowUp:
        n = cfg.unit_cells
        zero = np.zeros((n + 1, cfg.d))
        return LambdaResult(zero, zero, v_incr.copy(), blowup=True)
    gbar_w = _window_h_transform(state, res.g_x, negate_past=True)
    u_incr = v_incr + _drift_to_increments(gbar_w, cfg.h)
    if not refine:
        return LambdaResult(res.g_x, gbar_w, u_incr)

    best = (np.inf, u_incr, res.g_x, gbar_w)
    for _ in range(max_iter):
        fwd = lambda_map(state, u_incr)
        if fwd.blowup:
            break
        v_pred = u_incr + _drift_to_increments(fwd.g_w, cfg.h)
        err = v_pred - v_incr
        gap = float(np.abs(np.cumsum(err, axis=0)).max())
        if gap < best[0]:
            best = (gap, u_incr.copy(), -fwd.g_x, -fwd.g_w)
        if gap <= tol:
            break
        u_incr = u_incr - err
    _, u_best, gx_best, gw_best = best
    return LambdaResult(gx_best, gw_best, u_best)


def girsanov_log_density(g_nodes: np.ndarray, w_incr: np.ndarray, h: float) -> float:
    """log of exp(int g dw - 1/2 int |g|^2 dt), left-point sums."""
    stoch = float(np.sum(g_nodes[:-1] * w_incr))
    quad = float(np.sum(g_nodes[:-1] ** 2) * h)
    return stoch - 0.5 * quad


def girsanov_density(g_nodes: np.ndarray, w_incr: np.ndarray, h: float):
    """Density and log-density of the drifted Wiener law along one window."""
    logd = girsanov_log_density(g_nodes, w_incr, h)
    return math.exp(min(logd, 700.0)), logd


# ---------------------------------------------------------------------------
# the three steps


def _evolve_window(state: ReplicaState, cells: int, glued: bool) -> None:
    """Advance both coordinates over `cells` lattice cells (no new drift).

    Windows are split into dyadic chunks of at most one time unit.  On
    glued stretches the drifted coordinate is the same solution by
    construction (the forward fractional drift vanishes), so it is evolved
    once and mirrored.
    """
    cfg = state.ctx.cfg
    remaining = cells
    while remaining > 0:
        chunk = min(cfg.unit_cells, 2 ** int(math.floor(math.log2(remaining))))
        if chunk < 2:
            chunk = remaining = 2  # pad degenerate tails to a 2-cell chunk
        rp_y, _, _ = block_driver(state, state.tau_cells, chunk, drifted=False)
        try:
            state.Y = davie_solve(state.ctx.vf, rp_y, state.Y).values[-1]
        except SolverBlowUp as exc:
            state.Y = np.asarray(exc.last_state, dtype=float)
        if glued:
            state.Ytil = state.Y.copy()
        else:
            rp_t, _, _ = block_driver(state, state.tau_cells, chunk, drifted=True)
            try:
                state.Ytil = davie_solve(state.ctx.vf, rp_t, state.Ytil).values[-1]
            except SolverBlowUp as exc:
                state.Ytil = np.asarray(exc.last_state, dtype=float)
        if state.collect:
            h = cfg.h
            w_inc = state.window_incr(state.tau_cells, chunk)
            wt_inc = state.wtil_window_incr(state.tau_cells, chunk)
            state.pooled_w.append(w_inc / math.sqrt(h))
            state.pooled_wt.append(wt_inc / math.sqrt(h))
        state.tau_cells += chunk
        remaining -= chunk


def step1_attempt(state: ReplicaState, record: TrialRecord) -> bool:
    """One hitting attempt on the unit window; returns the success flag.

    Draws the candidate innovation, routes it to one of the three
    branches with the density weights of the symmetrised coupling, and
    evolves both coordinates with their actual lifted drivers.  Success is
    a positions match within the hit tolerance, after which the positions
    are snapped equal (exact equality is measure-zero in floating point).
    """
    ctx = state.ctx
    cfg = ctx.cfg
    n = cfg.unit_cells
    start = state.tau_cells
    w_incr = state.window_incr(start, n).copy()

    fwd = lambda_map(state, w_incr)
    bar = lambda_inverse(state, w_incr, refine=False)
    log_d_bar = girsanov_log_density(-fwd.g_w, w_incr, cfg.h)   # density of the inverse image law
    log_d_fwd = girsanov_log_density(-bar.g_w, w_incr, cfg.h)   # density of the forward image law
    rho1 = 0.5 * min(1.0, math.exp(min(log_d_bar, 50.0)))
    rho2 = 0.5 * min(1.0, math.exp(min(log_d_fwd, 50.0)))
    record.log_dens_bar = log_d_bar
    record.log_dens_fwd = log_d_fwd

    u = state.rng.uniform()
    if fwd.blowup:
        branch = "identity"
        wtil_incr = w_incr
        g_applied = None
        record.step1 = "blowup"
    elif u < rho1:
        branch = "lambda"
        wtil_incr = fwd.wtil_incr
        g_applied = fwd.g_w
    elif u < rho1 + rho2:
        branch = "lambda_bar"
        ref = lambda_inverse(state, w_incr, refine=True)
        wtil_incr = ref.wtil_incr
        g_applied = ref.g_w
    else:
        branch = "identity"
        wtil_incr = w_incr
        g_applied = None
    record.branch = branch
    record.gw_l2 = (
        0.0 if g_applied is None else float(np.sum(g_applied[:-1] ** 2) * cfg.h)
    )
    if g_applied is not None:
        state.add_segment(start, g_applied, "step1")

    rp_y, _, _ = block_driver(state, start, n, drifted=False)
    rp_t, _, _ = block_driver(state, start, n, drifted=True, w_incr_override=wtil_incr)
    try:
        y1 = davie_solve(ctx.vf, rp_y, state.Y).values[-1]
        yt1 = davie_solve(ctx.vf, rp_t, state.Ytil).values[-1]
    except SolverBlowUp:
        record.step1 = "blowup"
        _ = state.window_incr(start, n)
        state.tau_cells += n
        return False
    if state.collect:
        state.pooled_w.append(w_incr / math.sqrt(cfg.h))
        state.pooled_wt.append(wtil_incr / math.sqrt(cfg.h))
    state.tau_cells += n
    gap = float(np.linalg.norm(y1 - yt1))
    record.hit_gap = gap
    state.Y = y1
    if gap <= cfg.hit_tol * (1.0 + np.linalg.norm(y1)):
        state.Ytil = y1.copy()
        if record.step1 != "blowup":
            record.step1 = f"hit-{branch}"
        return True
    state.Ytil = yt1
    if record.step1 != "blowup":
        record.step1 = "miss"
    return False


def step2_attempt(state: ReplicaState, ell: int, record: TrialRecord):
    """One gluing attempt on the interval of length c2 2^ell.

    The gluing drift is the continuation of the shifted history; success
    is a reflection-maximal coupling of the drifted and plain Wiener laws
    on the interval (success probability 2 Phi(-m/2) for drift mass m).
    On failure the reflected residual drift is applied, which keeps the
    Wiener marginal exact.  Returns (outcome, reached_horizon) where
    outcome is True/False for the coupling result.
    """
    ctx = state.ctx
    cfg = ctx.cfg
    horizon_cells = int(round(cfg.horizon / cfg.h))
    wanted = int(math.ceil(cfg.c2 * 2.0**ell / cfg.h / 4.0)) * 4
    cells = min(wanted, horizon_cells - state.tau_cells)
    reached_horizon = cells < wanted
    if cells < 4:
        return True, True

    hist = state.history_as_past_drift(state.tau_cells)
    t_nodes = np.arange(1, cells + 1) * cfg.h
    if hist is None:
        g_s = np.zeros((cells + 1, cfg.d))
    else:
        # the continuation is smooth and decaying: evaluate on a coarse
        # geometric grid and interpolate to the lattice nodes
        span = cells * cfg.h
        t_coarse = np.unique(
            np.concatenate(
                [np.geomspace(cfg.h / 64.0, span, 288), [cfg.h / 64.0, span]]
            )
        )
        g_coarse = step2_drift(hist, t_coarse, ctx.consts, tol=1e-7, start_order=8)
        eval_full = np.concatenate([[cfg.h / 64.0], t_nodes])
        g_s = np.column_stack(
            [np.interp(eval_full, t_coarse, g_coarse[:, j]) for j in range(cfg.d)]
        )
    m2 = float(np.sum(g_s[:-1] ** 2) * cfg.h)
    m = math.sqrt(m2)
    record.step2_masses.append(m2)

    w_incr = state.window_incr(state.tau_cells, cells).copy()
    if m == 0.0:
        success = True
    else:
        e_nodes = g_s / m
        zeta = float(np.sum(e_nodes[:-1] * w_incr))
        log_accept = -m * zeta - 0.5 * m2
        success = math.log(state.rng.uniform()) < log_accept
    start = state.tau_cells
    if success:
        if m > 0.0:
            state.add_segment(start, g_s, "step2")
        _evolve_window(state, cells, glued=True)
    else:
        reflected = -2.0 * zeta * e_nodes
        state.add_segment(start, reflected, "reflect")
        _evolve_window(state, cells, glued=False)
    return success, reached_horizon


def step3_wait(state: ReplicaState, ell: int, k: int) -> float:
    """Waiting stage: no Wiener drift, identical innovations on both sides.

    The coordinates keep evolving (their drivers differ through the
    inherited drift's fractional shadow, which decays); returns the
    applied duration.
    """
    cfg = state.ctx.cfg
    horizon_cells = int(round(cfg.horizon / cfg.h))
    dur = cfg.delta3(ell, k)
    cells = int(math.ceil(dur / cfg.h / 4.0)) * 4
    cells = min(cells, horizon_cells - state.tau_cells)
    if cells > 0:
        _evolve_window(state, cells, glued=False)
    return cells * cfg.h


def run_scheme(
    vf: VectorFieldPair,
    cfg: SchemeConfig,
    replica: int = 0,
    collect_increments: bool = False,
    ctx: Optional[CouplingContext] = None,
) -> CouplingTrace:
    """One full replica: burn-in, trials until coalescence or the horizon.

    Deterministic given (config, replica): all draws come from one
    counter-based stream keyed by (seed, replica).
    """
    ctx = ctx or CouplingContext(vf, cfg)
    state = ReplicaState(ctx, replica, collect_increments)
    horizon_cells = int(round(cfg.horizon / cfg.h))

    # burn-in surrogate for the stationary start: the drifted coordinate
    # relaxes along the shared noise before the trial clock starts
    burn_cells = int(round(cfg.burn_in / cfg.h))
    if burn_cells > 0:
        y_saved = state.Y.copy()
        state.Y = state.Ytil.copy()
        _evolve_window(state, burn_cells, glued=False)
        state.Ytil = state.Y
        state.Y = y_saved

    trials = []
    tau_inf = None
    censored = False
    k = 0
    while True:
        k += 1
        if state.tau_cells >= horizon_cells:
            censored = True
            break
        trial_start = state.tau_cells * cfg.h
        adm = check_admissible(state)
        record = TrialRecord(
            k, trial_start, adm.admissible, adm.integral_value,
            "skip", "none", None, 0.0, math.nan, 0.0, 0.0, 0.0,
        )
        trials.append(record)
        if state.tau_cells + cfg.unit_cells > horizon_cells:
            censored = True
            break
        if adm.admissible:
            hit = step1_attempt(state, record)
        else:
            _evolve_window(state, cfg.unit_cells, glued=False)
            hit = False
            record.step1 = "skip"
        if hit:
            glue_start = state.tau_cells * cfg.h
            ell = 1
            glued_to_horizon = False
            failed_level = None
            while ell <= cfg.max_ell:
                ok, at_horizon = step2_attempt(state, ell, record)
                if not ok:
                    failed_level = ell
                    break
                if at_horizon or state.tau_cells >= horizon_cells:
                    glued_to_horizon = True
                    break
                ell += 1
            if glued_to_horizon or failed_level is None:
                tau_inf = glue_start
                record.fail_level = None
                break
            record.fail_level = failed_level
        else:
            record.fail_level = 0
        record.delta3 = step3_wait(state, record.fail_level, k)
        if state.tau_cells >= horizon_cells:
            censored = True
            break

    # trial bookkeeping: every non-final trial carries its failure level,
    # the final one either coalesced or was censored
    for t in trials[:-1]:
        assert t.fail_level is not None
    if tau_inf is not None:
        assert trials[-1].fail_level is None

    pooled_w = np.concatenate(state.pooled_w).ravel() if state.pooled_w else None
    pooled_wt = np.concatenate(state.pooled_wt).ravel() if state.pooled_wt else None
    return CouplingTrace(
        cfg.seed, replica, trials, tau_inf, censored and tau_inf is None,
        cfg.horizon, pooled_w, pooled_wt,
        gw_segments=[(s, v.copy(), kind) for s, v, kind in state.segments],
    )


def run_replicas(
    vf: VectorFieldPair,
    cfg: SchemeConfig,
    n_replicas: int,
    collect_increments: bool = False,
):
    """Serial fold over isolated replicas (order-independent streams)."""
    ctx = CouplingContext(vf, cfg)
    return [
        run_scheme(vf, cfg, r, collect_increments, ctx=ctx) for r in range(n_replicas)
    ]


# ---------------------------------------------------------------------------
# tail estimation


@dataclass
class TailReport:
    t: np.ndarray
    survival: np.ndarray
    tv_bound: np.ndarray
    slope: float
    slope_ci: float
    n_events: int
    n_censored: int
    note: str = (
        "the asymptotic -1/8 rate is not desk-verifiable; the fitted slope "
        "is reported, not asserted"
    )

    def export_csv(self, path) -> None:
        write_csv(
            path,
            ["t", "survival", "tv_bound"],
            np.column_stack([self.t, self.survival, self.tv_bound]),
        )


def kaplan_meier(durations: np.ndarray, observed: np.ndarray):
    """Product-limit survival estimate under right censoring."""
    durations = np.asarray(durations, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    order = np.argsort(durations, kind="stable")
    d, o = durations[order], observed[order]
    times = []
    surv = []
    s = 1.0
    n = d.size
    i = 0
    at_risk = n
    while i < n:
        t = d[i]
        die = 0
        j = i
        while j < n and d[j] == t:
            die += int(o[j])
            j += 1
        if die:
            s *= 1.0 - die / at_risk
            times.append(t)
            surv.append(s)
        at_risk -= j - i
        i = j
    return np.array(times), np.array(surv)


def estimate_tail(
    durations,
    observed,
    t_grid: Optional[np.ndarray] = None,
    fit_quantiles=(0.1, 0.9),
) -> TailReport:
    """Survival curve of the coalescence time plus the TV bound 2 S(t).

    The log-log least-squares slope over the central quantile range comes
    with a 95% CI from the regression; censored replicas enter through
    the product-limit correction.
    """
    durations = np.asarray(durations, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if not np.any(observed):
        raise ValueError("all replicas censored: no events to estimate from")
    km_t, km_s = kaplan_meier(durations, observed)
    base = km_s[km_t <= 0][-1] if np.any(km_t <= 0) else 1.0
    pos = km_t > 0
    km_t, km_s = km_t[pos], km_s[pos]
    if t_grid is None:
        hi = max(durations.max(), 1e-6)
        lo = max(km_t.min(), 1e-6) if km_t.size else hi / 10.0
        t_grid = np.geomspace(lo, hi, 60)
    if km_t.size:
        idx = np.searchsorted(km_t, t_grid, side="right") - 1
        surv = np.where(idx >= 0, km_s[np.clip(idx, 0, None)], base)
    else:
        surv = np.full(t_grid.size, base)
    tv = np.minimum(1.0, 2.0 * surv)

    ev = np.sort(durations[observed & (durations > 0)])
    slope, ci = math.nan, math.nan
    if ev.size < 3:
        return TailReport(
            t_grid, surv, tv, slope, ci, int(observed.sum()), int((~observed).sum())
        )
    lo = np.quantile(ev, fit_quantiles[0])
    hi = np.quantile(ev, fit_quantiles[1])
    mask = (km_t >= lo) & (km_t <= hi) & (km_s > 0)
    if mask.sum() >= 3:
        x = np.log(km_t[mask])
        y = np.log(km_s[mask])
        A = np.column_stack([x, np.ones_like(x)])
        coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
        slope = float(coef[0])
        dof = max(mask.sum() - 2, 1)
        sigma2 = float(res[0]) / dof if res.size else 0.0
        cov = sigma2 * np.linalg.inv(A.T @ A)[0, 0]
        ci = 1.96 * math.sqrt(max(cov, 0.0))
    return TailReport(
        t_grid, surv, tv, slope, ci, int(observed.sum()), int((~observed).sum())
    )


def tail_from_traces(traces: Sequence[CouplingTrace], **kw) -> TailReport:
    durations = np.array(
        [t.tau_inf if t.coupled else t.horizon for t in traces], dtype=float
    )
    observed = np.array([t.coupled for t in traces], dtype=bool)
    return estimate_tail(durations, observed, **kw)


def step2_shadow_residual(trace: CouplingTrace, consts: TransformConstants, h: float):
    """Fractional shadow of the full drift history on glued stretches.

    Probes the induced forward fractional drift of the whole history at
    interior points of the successful gluing segments; the continuation
    construction makes it vanish there up to calibration, interpolation
    and quadrature residuals.  Returns the worst probed magnitude
    relative to the history's own drift scale.
    """
    step2_segs = [(s, v) for s, v, kind in trace.gw_segments if kind == "step2"]
    if not step2_segs:
        return 0.0
    last_cell = max(s + v.shape[0] for s, v, _ in trace.gw_segments) + 1
    d = trace.gw_segments[0][1].shape[1]
    karr, varr = assemble_drift_knots(trace.gw_segments, h, last_cell, d)
    scale = max(float(np.abs(varr).max()), 1e-12)
    worst = 0.0
    for start, nodes in step2_segs:
        t0 = start * h
        span = (nodes.shape[0] - 1) * h
        probe = t0 + np.linspace(0.25, 0.95, 8) * span
        gx = fractional_derivative_map(karr, varr, probe, consts.H + 0.5, consts.A_x)
        worst = max(worst, float(np.abs(gx).max()) / scale)
    return worst


def increment_statistics(pooled: np.ndarray):
    """Mean and variance of pooled normalised increments."""
    return float(np.mean(pooled)), float(np.var(pooled))
