"""Level-2 rough paths built from piecewise-linear interpolations.

The level-2 tensor of a polygon has a closed form (left-point sums plus
half the squared step), so lifts carry no quadrature error.  Areas are
accumulated once along the fine sub-grid into prefix tensors; the area of
an arbitrary pair is reconstructed from the prefix values through the
Chen relation, which keeps storage linear in the number of grid points.
A dense pair table is materialised only for norm computations on
moderate grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import GridPath, Increment2, TimeGrid, holder_norm, pick_stride, triple_sweep, write_csv

_MAX_TABLE_LEVEL = 10


class LiftOverflow(RuntimeError):
    """Raised when area accumulation leaves the finite range."""

    def __init__(self, pair):
        super().__init__(f"non-finite area at pair {pair}")
        self.pair = pair


@dataclass
class RoughPath:
    """A grid path with its level-2 area tensor.

    consec[i] is the area over [t_i, t_{i+1}]; prefix[i] the area over
    [t_0, t_i].  Pair areas follow from the prefix values via Chen, so the
    two identities of a Levy area hold by construction (up to rounding).
    """

    path: GridPath
    consec: np.ndarray
    prefix: np.ndarray
    lift_resolution: int
    fine_path: Optional[GridPath] = None
    _table: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def grid(self) -> TimeGrid:
        return self.path.grid

    @property
    def d(self) -> int:
        return self.path.d

    def pair_area(self, i: int, j: int) -> np.ndarray:
        """Area over [t_i, t_j] reconstructed through the Chen relation."""
        x = self.path.values
        return (
            self.prefix[j]
            - self.prefix[i]
            - np.outer(x[i] - x[0], x[j] - x[i])
        )

    def area_table(self) -> np.ndarray:
        """Dense (n, n, d, d) table of pair areas (moderate levels only)."""
        if self._table is None:
            n = self.grid.n_points
            if self.grid.level > _MAX_TABLE_LEVEL:
                raise MemoryError(
                    f"area table is restricted to level <= {_MAX_TABLE_LEVEL}; "
                    "use pair_area for on-demand reconstruction"
                )
            x = self.path.values
            xs = x - x[0]
            dx = x[None, :, :] - x[:, None, :]
            self._table = (
                self.prefix[None, :]
                - self.prefix[:, None]
                - np.einsum("si,stj->stij", xs, dx)
            )
        return self._table

    def area_increment(self) -> Increment2:
        return Increment2(self.grid, self.area_table())

    def with_table(self, table: np.ndarray) -> "RoughPath":
        """Copy carrying an explicit (possibly corrupted) area table."""
        rp = RoughPath(self.path, self.consec, self.prefix, self.lift_resolution, self.fine_path)
        rp._table = np.array(table)
        return rp

    def export_area_csv(self, path, pairs: str = "consecutive") -> None:
        t = self.grid.points
        d = self.d
        header = ["s", "t"] + [f"a{i+1}{j+1}" for i in range(d) for j in range(d)]
        if pairs == "consecutive":
            rows = [
                np.concatenate([[t[i], t[i + 1]], self.consec[i].ravel()])
                for i in range(len(self.consec))
            ]
        elif pairs == "all":
            tab = self.area_table()
            rows = [
                np.concatenate([[t[i], t[j]], tab[i, j].ravel()])
                for i in range(len(t))
                for j in range(i + 1, len(t))
            ]
        else:
            raise ValueError("pairs must be 'consecutive' or 'all'")
        write_csv(path, header, np.array(rows))


def _polygon_prefix(values: np.ndarray) -> np.ndarray:
    """Prefix areas of a polygon: exact iterated integrals from the origin."""
    dx = np.diff(values, axis=0)
    base = values[:-1] - values[0]
    steps = np.einsum("ki,kj->kij", base, dx) + 0.5 * np.einsum("ki,kj->kij", dx, dx)
    prefix = np.zeros((values.shape[0],) + steps.shape[1:])
    np.cumsum(steps, axis=0, out=prefix[1:])
    return prefix


def lift_piecewise_linear(x: GridPath, level: Optional[int] = None) -> RoughPath:
    """Canonical lift of the polygon through x, stored at a coarser level.

    x is sampled at the fine (sub) level; `level` selects the storage grid
    (defaults to the fine level itself).  Consecutive-cell areas aggregate
    the per-cell closed forms; everything else follows by Chen.
    """
    sub_level = x.grid.level
    if level is None:
        level = sub_level
    if level > sub_level:
        raise ValueError("storage level cannot exceed the sampling level")
    stride = 2 ** (sub_level - level)
    prefix_fine = _polygon_prefix(x.values)
    if not np.all(np.isfinite(prefix_fine)):
        bad = np.argwhere(~np.isfinite(prefix_fine))[0]
        raise LiftOverflow((x.grid.points[0], x.grid.points[bad[0]]))
    coarse = GridPath(TimeGrid(level, x.grid.origin, x.grid.span), x.values[::stride])
    prefix = prefix_fine[::stride]
    xv = coarse.values
    dx = np.diff(xv, axis=0)
    consec = (
        prefix[1:]
        - prefix[:-1]
        - np.einsum("ki,kj->kij", xv[:-1] - xv[0], dx)
    )
    return RoughPath(coarse, consec, prefix, sub_level, fine_path=x)


def chen_defect(rp: RoughPath, table: Optional[np.ndarray] = None) -> float:
    """max over grid triples of |delta x2_{sut} - dx_su (x) dx_ut| (Frobenius)."""
    tab = rp.area_table() if table is None else table
    x = rp.path.values
    n = x.shape[0]
    worst = 0.0
    for u in range(1, n - 1):
        block = (
            tab[:u, u + 1 :]
            - tab[:u, u][:, None]
            - tab[u, u + 1 :][None, :]
            - np.einsum("si,tj->stij", x[u] - x[:u], x[u + 1 :] - x[u])
        )
        m = float(np.sqrt(np.sum(block**2, axis=(2, 3))).max())
        if m > worst:
            worst = m
    return worst


def symmetric_part_defect(rp: RoughPath) -> float:
    """max over pairs of |x2 + x2^T - dx (x) dx| (machine-level for lifts)."""
    tab = rp.area_table()
    x = rp.path.values
    dx = x[None, :, :] - x[:, None, :]
    res = tab + tab.swapaxes(2, 3) - np.einsum("sti,stj->stij", dx, dx)
    n = x.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(np.sqrt(np.sum(res[iu] ** 2, axis=(1, 2))).max())


def _area_increment_strided(rp: RoughPath, stride: int) -> Increment2:
    coarse_level = rp.grid.level - int(round(np.log2(stride)))
    sub = rp.path.values[::stride]
    prefix = rp.prefix[::stride]
    dx = sub[None, :, :] - sub[:, None, :]
    tab = prefix[None, :] - prefix[:, None] - np.einsum("si,stj->stij", sub - sub[0], dx)
    return Increment2(TimeGrid(coarse_level, rp.grid.origin, rp.grid.span), tab)


def rough_norm(rp: RoughPath, gamma: float, interval=None) -> float:
    """N[x; C1^gamma] + N[x2; C2^{2 gamma}] over the (sub)interval.

    Beyond the dense-table level the pair set is strided, which makes the
    value a lower bound (consistent with NormReport.lower_bound).
    """
    from .grid import delta1

    if rp.grid.level <= _MAX_TABLE_LEVEL:
        path_part = holder_norm(delta1(rp.path), gamma, interval).value
        area_part = holder_norm(rp.area_increment(), 2 * gamma, interval).value
    else:
        stride = 2 ** (rp.grid.level - _MAX_TABLE_LEVEL)
        path_part = holder_norm(delta1(rp.path), gamma, interval, stride=stride).value
        area_part = holder_norm(_area_increment_strided(rp, stride), 2 * gamma, interval).value
    return path_part + area_part


def lift_with_drift(
    rp_z: RoughPath,
    g: GridPath,
    g_deriv=None,
    gamma: Optional[float] = None,
    first_cell_nodes: int = 64,
) -> RoughPath:
    """Canonical lift of z + g assembled from rp_z plus cross integrals.

    g is sampled on rp_z's fine grid; the cross terms between the two
    polygons have closed forms on every fine cell.  When g carries a
    derivative singularity at the window origin (g' ~ t^(gamma-1)), pass
    the derivative callable/samples and gamma: the first fine cell is then
    integrated after the substitution u = r^(1/gamma), which makes the
    integrand bounded.
    """
    fine = rp_z.fine_path if rp_z.fine_path is not None else rp_z.path
    if g.grid.n_points != fine.grid.n_points or abs(g.grid.origin - fine.grid.origin) > 1e-12:
        raise ValueError("drift must be sampled on the lift's fine grid")
    if not np.all(np.isfinite(g.values)):
        raise ValueError("non-finite drift samples")
    z = fine.values
    gv = g.values
    if not gv.any():
        return rp_z
    sum_path = GridPath(fine.grid, z + gv)
    out = lift_piecewise_linear(sum_path, rp_z.grid.level)

    if g_deriv is not None and gamma is not None:
        # replace the polygon's first-cell contribution by a singular
        # quadrature against the true derivative
        h = fine.grid.h
        t0 = fine.grid.origin
        r = (np.arange(first_cell_nodes) + 0.5) / first_cell_nodes * h**gamma
        u = r ** (1.0 / gamma)
        du = (h**gamma / first_cell_nodes) * (1.0 / gamma) * r ** (1.0 / gamma - 1.0)
        if callable(g_deriv):
            gp = np.stack([np.atleast_1d(np.asarray(g_deriv(t0 + ui), dtype=float)) for ui in u])
        else:
            raise ValueError("g_deriv must be callable when gamma is given")
        # linear z on the first fine cell
        frac = (u / h)[:, None]
        z_u = z[0] + frac * (z[1] - z[0])
        g_u = np.cumsum(gp * du[:, None], axis=0)  # g(u) - g(0), midpoint accumulation
        cross1 = np.einsum("ki,kj,k->ij", z_u - z[0], gp, du)
        cross2 = np.einsum("ki,kj,k->ij", z[1] - z_u, gp, du).T
        cross3 = np.einsum("ki,kj,k->ij", g_u, gp, du)
        # polygon versions being replaced
        dz0 = z[1] - z[0]
        dg0 = gv[1] - gv[0]
        poly_cross = 0.5 * (np.outer(dz0, dg0) + np.outer(dg0, dz0) + np.outer(dg0, dg0))
        correction = cross1 + cross2 + cross3 - poly_cross
        out.consec[0] += correction
        out.prefix[1:] += correction[None, :, :]
        out._table = None
        # keep the symmetric-part identity exact: retain only the
        # antisymmetric part of the correction beyond the polygon value
        _resymmetrise(out)
    return out


def _resymmetrise(rp: RoughPath) -> None:
    """Force x2 + x2^T = dx (x) dx on consecutive cells, then rebuild prefixes."""
    x = rp.path.values
    dx = np.diff(x, axis=0)
    sym = 0.5 * np.einsum("ki,kj->kij", dx, dx)
    anti = 0.5 * (rp.consec - rp.consec.swapaxes(1, 2))
    rp.consec = sym + anti
    steps = rp.consec + np.einsum("ki,kj->kij", x[:-1] - x[0], dx)
    rp.prefix = np.zeros((x.shape[0],) + rp.consec.shape[1:])
    np.cumsum(steps, axis=0, out=rp.prefix[1:])
    rp._table = None
