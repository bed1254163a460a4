import math

import numpy as np
import pytest

from roughcouple.grid import (
    GridPath,
    Increment2,
    TimeGrid,
    delta1,
    delta2,
    ekgamma_norm,
    holder_norm,
    sewing_check,
    singular_norm,
    singular_step_max,
    triple_norm,
    weighted_past_norm,
)


def brute_pair_sup(data, times, weight):
    """Double-loop oracle for pair suprema (independent of the grid module)."""
    best = 0.0
    n = len(times)
    for i in range(n):
        for j in range(i + 1, n):
            w = weight(times[i], times[j])
            if w > 0:
                best = max(best, np.linalg.norm(np.atleast_1d(data[i, j])) / w)
    return best


def brute_triple_sup(data, times, weight):
    """Triple-loop oracle for the cocycle supremum."""
    best = 0.0
    n = len(times)
    for i in range(n):
        for k in range(i + 1, n):
            for j in range(k + 1, n):
                w = weight(times[i], times[j])
                if w > 0:
                    v = data[i, j] - data[i, k] - data[k, j]
                    best = max(best, np.linalg.norm(np.atleast_1d(v)) / w)
    return best


def test_grid_points_uniform():
    g = TimeGrid(4, origin=2.0, span=3.0)
    assert g.n_points == 17
    assert np.allclose(np.diff(g.points), g.h)
    assert g.points[0] == 2.0 and g.points[-1] == 5.0
    assert g.index_of(2.0 + 3 * g.h) == 3


def test_delta1_constant_and_linear():
    g = TimeGrid(3)
    const = GridPath(g, np.ones(g.n_points))
    assert np.all(delta1(const).data == 0.0)

    lin = GridPath(g, g.points)
    d = delta1(lin)
    i, j = g.index_of(0.25), g.index_of(1.0)
    assert d.data[i, j, 0] == pytest.approx(0.75)
    # antisymmetry under swap
    assert np.allclose(d.data[j, i], -d.data[i, j])


def test_delta1_matches_pointwise_oracle():
    rng = np.random.default_rng(7)
    g = TimeGrid(5)
    f = GridPath(g, rng.standard_normal((g.n_points, 3)))
    d = delta1(f).data
    for i in range(g.n_points):
        for j in range(g.n_points):
            assert np.array_equal(d[i, j], f.values[j] - f.values[i])


def test_delta2_of_delta1_vanishes():
    rng = np.random.default_rng(11)
    g = TimeGrid(5)
    f = GridPath(g, rng.standard_normal((g.n_points, 2)) * 5)
    d3 = delta2(delta1(f))
    tol = 4 * np.finfo(float).eps * np.abs(f.values).max()
    assert d3.max_abs() <= tol


def test_delta2_algebraic_identity():
    # g_st = (t-s)^2 has (delta g)_{sut} = 2 (u-s)(t-u)
    g = TimeGrid(4)
    t = g.points
    data = (t[None, :] - t[:, None]) ** 2
    inc = Increment2(g, data)
    d3 = delta2(inc)
    s, u, tt = g.index_of(0.0), g.index_of(0.25), g.index_of(1.0)
    assert d3.value(s, u, tt) == pytest.approx(2 * 0.25 * 0.75)
    assert d3.value(s, u, tt) == pytest.approx(0.375)


def test_delta2_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    g = TimeGrid(4)
    data = rng.standard_normal((g.n_points, g.n_points))
    data[np.arange(g.n_points), np.arange(g.n_points)] = 0.0
    inc = Increment2(g, data)
    dense = delta2(inc).dense()
    n = g.n_points
    for i in range(n):
        for k in range(n):
            for j in range(n):
                expect = data[i, j] - data[i, k] - data[k, j]
                assert dense[i, k, j] == pytest.approx(expect)


def test_holder_norm_sqrt_path():
    # |sqrt(t) - sqrt(s)| <= sqrt(t-s), equality at s=0
    g = TimeGrid(6)
    f = GridPath(g, np.sqrt(g.points))
    rep = holder_norm(delta1(f), 0.5)
    assert rep.value == pytest.approx(1.0, rel=1e-12)
    assert rep.arg_pair[0] == 0.0


def test_holder_norm_zero_increment():
    g = TimeGrid(3)
    rep = holder_norm(Increment2(g, np.zeros((g.n_points, g.n_points))), 0.7)
    assert rep.value == 0.0


def test_holder_norm_matches_brute_force():
    rng = np.random.default_rng(13)
    g = TimeGrid(8)
    w = GridPath(g, np.cumsum(rng.standard_normal(g.n_points)) * math.sqrt(g.h))
    inc = delta1(w)
    rep = holder_norm(inc, 0.4)
    oracle = brute_pair_sup(inc.data[..., 0], g.points, lambda s, t: (t - s) ** 0.4)
    assert rep.value == pytest.approx(oracle, rel=1e-12)


def test_holder_norm_monotone_in_interval():
    rng = np.random.default_rng(5)
    g = TimeGrid(6)
    f = GridPath(g, np.cumsum(rng.standard_normal(g.n_points)))
    inc = delta1(f)
    inner = holder_norm(inc, 0.3, interval=(0.25, 0.75)).value
    outer = holder_norm(inc, 0.3, interval=(0.0, 1.0)).value
    assert inner <= outer


def test_holder_norm_rejects_degenerate_interval():
    g = TimeGrid(3)
    inc = Increment2(g, np.zeros((g.n_points, g.n_points)))
    with pytest.raises(ValueError, match="grid too small"):
        holder_norm(inc, 0.5, interval=(0.25, 0.25))


def test_singular_norm_beta_one_reduces_to_classical():
    rng = np.random.default_rng(2)
    g = TimeGrid(5)
    f = GridPath(g, np.cumsum(rng.standard_normal(g.n_points)))
    inc = delta1(f)
    alpha, mu = 0.35, 0.9
    combined = singular_norm(inc, alpha, mu, 1.0).value
    classical = max(holder_norm(inc, alpha).value, holder_norm(inc, mu).value)
    assert combined == pytest.approx(classical, rel=1e-12)


def test_singular_norm_zero():
    g = TimeGrid(4)
    rep = singular_norm(Increment2(g, np.zeros((g.n_points, g.n_points))), 0.4, 1.0, 0.4)
    assert rep.value == 0.0


def test_singular_norm_weighted_derivative_path():
    # a path with derivative t^{gamma-1} lies in the gamma-singular class:
    # the singular branch stays finite, and matches the brute-force oracle
    gamma = 0.4
    g = TimeGrid(7)
    f = GridPath(g, g.points**gamma)
    inc = delta1(f)
    rep = singular_norm(inc, gamma, 1.0, gamma)
    t = g.points
    # oracle: evaluate both branches explicitly
    best = 0.0
    for i in range(len(t)):
        for j in range(i + 1, len(t)):
            v = abs(f.values[j, 0] - f.values[i, 0])
            best = max(best, v / (t[j] - t[i]) ** gamma)
            if t[i] > 0:
                best = max(best, v / ((t[j] - t[i]) ** 1.0 * t[i] ** (gamma - 1.0)))
    assert np.isfinite(rep.value)
    assert rep.value == pytest.approx(best, rel=1e-12)


def test_weighted_past_norm_zero_and_linear():
    g = TimeGrid(5, origin=-1.0, span=1.0)
    zero = GridPath(g, np.zeros(g.n_points))
    assert weighted_past_norm(zero, 0.4).value == 0.0

    lin = GridPath(g, g.points)
    rep = weighted_past_norm(lin, 0.4)
    oracle = brute_pair_sup(
        delta1(lin).data[..., 0],
        g.points,
        lambda s, t: (t - s) ** 0.4 * math.sqrt(1 + abs(s) + abs(t)),
    )
    assert rep.value == pytest.approx(oracle, rel=1e-12)


def test_weighted_past_norm_monotone_window():
    rng = np.random.default_rng(21)
    fine = TimeGrid(6, origin=-2.0, span=2.0)
    w = GridPath(fine, np.cumsum(rng.standard_normal(fine.n_points)) * 0.2)
    # shrink the window: drop the earliest half of the samples
    half = GridPath(TimeGrid(5, origin=-1.0, span=1.0), w.values[32:])
    assert weighted_past_norm(half, 0.4).value <= weighted_past_norm(w, 0.4).value


def test_ekgamma_norm_monomials():
    t = TimeGrid(8).points[1:]
    gamma = 0.4
    # f(t) = t: sup t^{1-gamma} * 1 = 1 on (0, 1]
    rep = ekgamma_norm(t, [np.ones_like(t)], gamma)
    assert rep.value == pytest.approx(1.0)
    # zero derivative
    assert ekgamma_norm(t, [np.zeros_like(t)], gamma).value == 0.0
    # f(t) = t^gamma: sup t^{1-gamma} * gamma t^{gamma-1} = gamma
    rep = ekgamma_norm(t, [gamma * t ** (gamma - 1.0)], gamma)
    assert rep.value == pytest.approx(gamma, rel=1e-12)


def test_ekgamma_norm_missing_order():
    t = np.array([0.5, 1.0])
    with pytest.raises(ValueError, match="order 2"):
        ekgamma_norm(t, [np.ones(2), np.ones(3)], 0.4)


def test_triple_norm_matches_brute_force():
    rng = np.random.default_rng(17)
    g = TimeGrid(4)
    data = rng.standard_normal((g.n_points, g.n_points))
    data[np.arange(g.n_points), np.arange(g.n_points)] = 0.0
    inc = Increment2(g, data)
    alpha, mu, lam = 0.35, 1.1, 0.5
    rep = triple_norm(inc, alpha, mu, lam)
    t = g.points
    best = 0.0
    n = len(t)
    for i in range(n):
        for k in range(i + 1, n):
            for j in range(k + 1, n):
                v = abs(data[i, j] - data[i, k] - data[k, j])
                best = max(best, v / (t[j] - t[i]) ** alpha)
                if t[i] > 0:
                    best = max(
                        best, v / ((t[j] - t[i]) ** mu * t[i] ** (lam - 1.0))
                    )
    assert rep.value == pytest.approx(best, rel=1e-12)


def test_sewing_check_delta_of_path_collapses():
    # G = delta f has delta G = 0; the bound collapses to the step maximum
    rng = np.random.default_rng(23)
    g = TimeGrid(6)
    f = GridPath(g, np.cumsum(rng.standard_normal(g.n_points)) * 0.3)
    rep = sewing_check(delta1(f), 0.35, 0.5, 1.0, 1.5)
    assert rep.triple_term == pytest.approx(0.0, abs=1e-12)
    assert rep.rhs == pytest.approx(rep.step_term, rel=1e-9)
    assert not rep.violation


def test_sewing_check_zero_increment():
    g = TimeGrid(4)
    rep = sewing_check(Increment2(g, np.zeros((g.n_points, g.n_points))), 0.5, 0.5, 1.0, 2.0)
    assert rep.ratio == 0.0 and not rep.violation


def test_sewing_check_quadratic_ratio_stable_across_levels():
    # G_st = (t-s)^2 with alpha=1, lambda=1, mu1=2, mu2=2
    ratios = {}
    for level in range(4, 11):
        g = TimeGrid(level)
        t = g.points
        inc = Increment2(g, (t[None, :] - t[:, None]) ** 2)
        ratios[level] = sewing_check(inc, 1.0, 1.0, 2.0, 2.0).ratio
    assert max(ratios.values()) <= 1.5 * max(ratios[4], 1e-30)
    assert all(np.isfinite(r) for r in ratios.values())


def test_sewing_check_parameter_validation():
    g = TimeGrid(3)
    inc = Increment2(g, np.zeros((g.n_points, g.n_points)))
    with pytest.raises(ValueError):
        sewing_check(inc, 0.5, 0.4, 1.0, 2.0)  # alpha > lambda
    with pytest.raises(ValueError):
        sewing_check(inc, 0.5, 0.5, 0.5, 2.0)  # mu1 < 1
    with pytest.raises(ValueError):
        sewing_check(inc, 0.5, 0.5, 1.0, 1.0)  # mu2 not > 1


def test_singular_step_max_excludes_first_point():
    g = TimeGrid(3)
    t = g.points
    inc = Increment2(g, (t[None, :] - t[:, None]))
    # lam < 1 puts infinite weight at s = 0; the step max must stay finite
    val = singular_step_max(inc, 0.5, 1.0, 0.5)
    assert np.isfinite(val)


def test_gridpath_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(29)
    g = TimeGrid(4)
    p = GridPath(g, rng.standard_normal((g.n_points, 2)))
    f = tmp_path / "path.csv"
    p.to_csv(f)
    q = GridPath.read_csv(f, g)
    assert np.array_equal(p.values, q.values)
    header = f.read_text().splitlines()[0]
    assert header == "t,x1,x2"
