"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
lines; every tolerance is pinned here.  The asymptotic equilibrium rate
itself is not desk-verifiable: criterion 13 validates the estimator on
synthetic heavy-tailed data and reports (without asserting) the slope
measured on real runs.
"""

import math

import numpy as np
import pytest

import roughcouple.coupling as cp
from roughcouple.fbm import (
    alpha_for_unit_variance,
    fbm_from_wiener,
    liouville_transform,
    rng_stream,
    sample_wiener,
)
from roughcouple.fraccalc import (
    PastDrift,
    calibrate_constants,
    gw_to_gx,
    gx_to_gw,
    h_transform,
)
from roughcouple.grid import GridPath, Increment2, TimeGrid, sewing_check
from roughcouple.lyapunov import fit_lyapunov_constant, lyapunov_check, scale_augmented
from roughcouple.rde import (
    CutoffFunction,
    VectorFieldPair,
    davie_solve,
    solve_hitting,
)
from roughcouple.roughpath import chen_defect, lift_piecewise_linear, rough_norm

H = 0.4
GAMMA = 0.35


def report(num, name, detail):
    print(f"\nACCEPTANCE {num:02d} {name}: PASS ({detail})")


def running_field():
    return VectorFieldPair(
        1,
        lambda y: np.array([-y[0]]),
        lambda y: np.array([[2.0 + math.sin(y[0])]]),
        lambda y: np.array([[-1.0]]),
        lambda y: np.array([[[math.cos(y[0])]]]),
        lambda y: np.array([[[[-math.sin(y[0])]]]]),
    )


def fbm_innovation_lift(seed_pair, level, d=1, scale=1.0, store=None):
    rng = rng_stream(*seed_pair)
    h = 2.0**-level
    incr = rng.standard_normal((2**level, d)) * math.sqrt(h)
    alpha = alpha_for_unit_variance(H, level)
    z = scale * liouville_transform(incr, h, H, alpha)
    return lift_piecewise_linear(GridPath(TimeGrid(level), z), store or min(level, 9))


@pytest.fixture(scope="module")
def consts():
    return calibrate_constants(H, alpha_for_unit_variance(H, 9))


def test_01_chen_relation():
    # lifted fractional samples at n = 9, sub-level 13, 100 samples
    worst = 0.0
    for i in range(100):
        rng = rng_stream(101, i + 1)
        w = sample_wiener(rng, t_past=256.0, t_max=1.0, level=13, d=1)
        scen = fbm_from_wiener(w, H)
        rp = lift_piecewise_linear(scen.X, 9)
        scale = 1.0 + scen.X.sup_norm() ** 2
        worst = max(worst, chen_defect(rp) / scale)
    assert worst <= 1e-10
    # a smaller two-dimensional batch keeps the tensor case honest
    worst2 = 0.0
    for i in range(5):
        rng = rng_stream(102, i + 1)
        w = sample_wiener(rng, t_past=256.0, t_max=1.0, level=13, d=2)
        scen = fbm_from_wiener(w, H)
        rp = lift_piecewise_linear(scen.X, 9)
        worst2 = max(worst2, chen_defect(rp) / (1.0 + scen.X.sup_norm() ** 2))
    assert worst2 <= 1e-10
    report(1, "chen-relation", f"max scaled defect {max(worst, worst2):.2e} <= 1e-10")


def test_02_levy_area_scaling():
    n_samples = 2000
    ks = np.arange(2, 8)
    acc = np.zeros(ks.size)
    for i in range(n_samples):
        rng = rng_stream(201, i + 1)
        w = sample_wiener(rng, t_past=256.0, t_max=1.0, level=13, d=2)
        scen = fbm_from_wiener(w, H)
        rp = lift_piecewise_linear(scen.X, 13)
        for j, k in enumerate(ks):
            a = rp.pair_area(0, int(2 ** (13 - k)))
            acc[j] += np.sum(a**2) / n_samples
    slope = np.polyfit(np.log(2.0**-ks), np.log(acc), 1)[0]
    assert abs(slope - 4 * H) <= 0.15
    report(2, "levy-area-scaling", f"slope {slope:.3f} within 4H +- 0.15")


def test_03_fbm_covariance():
    n = 10**4
    xs = np.empty((n, 2))
    for i in range(n):
        rng = rng_stream(301, i + 1)
        w = sample_wiener(rng, t_past=512.0, t_max=1.0, level=8, d=1)
        scen = fbm_from_wiener(w, H)
        g = scen.X.grid
        xs[i] = (
            scen.X.values[g.index_of(0.5), 0],
            scen.X.values[g.index_of(1.0), 0],
        )
    cov = float(np.cov(xs.T)[0, 1])
    assert abs(cov - 0.5) <= 0.02
    report(3, "fbm-covariance", f"Cov(X_1/2, X_1) = {cov:.4f} within 0.5 +- 0.02")


def test_04_davie_benchmark():
    vf = VectorFieldPair(
        1, lambda y: np.zeros(1), lambda y: np.array([[y[0]]]),
        lambda y: np.zeros((1, 1)), lambda y: np.ones((1, 1, 1)),
        lambda y: np.zeros((1, 1, 1, 1)),
    )
    fine = TimeGrid(14)
    rp = lift_piecewise_linear(GridPath(fine, np.sin(fine.points)), 12)
    y1 = davie_solve(vf, rp, np.ones(1)).values[-1, 0]
    err = abs(y1 - math.exp(math.sin(1.0)))
    assert err <= 1e-3
    report(4, "davie-benchmark", f"|y1 - e^sin(1)| = {err:.2e} <= 1e-3 at n = 12")


def test_05_self_convergence():
    vf = running_field()
    levels = (7, 8, 9, 10, 11)
    n_samples = 20
    acc = np.zeros(len(levels) - 1)
    alpha = alpha_for_unit_variance(H, 13)
    for s in range(n_samples):
        rng = rng_stream(501, s + 1)
        h = 2.0**-13
        incr = rng.standard_normal((2**13, 1)) * math.sqrt(h)
        z = liouville_transform(incr, h, H, alpha)
        fine = GridPath(TimeGrid(13), z)
        sols = [davie_solve(vf, lift_piecewise_linear(fine, lv), np.ones(1)) for lv in levels]
        for k in range(len(levels) - 1):
            a = sols[k].values[:, 0]
            b = sols[k + 1].values[::2, 0]
            acc[k] += np.abs(a - b).max() / n_samples
    order = -np.polyfit(np.arange(acc.size), np.log2(acc), 1)[0]
    assert np.all(np.diff(acc) < 0)
    assert order >= 0.5
    report(5, "self-convergence", f"monotone decrease, fitted order {order:.2f} >= 0.5")


def test_06_lyapunov_inequality():
    vf = running_field()

    def driver(seed_pair):
        rng = rng_stream(*seed_pair)
        w = sample_wiener(rng, t_past=256.0, t_max=1.0, level=12, d=1)
        scen = fbm_from_wiener(w, H)
        return lift_piecewise_linear(scen.X, 9)

    base = [driver((601, i + 1)) for i in range(13)]
    calibration = scale_augmented(base)  # 104 calibration paths
    pool = [np.array([v]) for v in (-3.0, -1.0, -0.3, 0.0, 0.3, 1.0, 3.0)]
    C = fit_lyapunov_constant(vf, calibration, pool, GAMMA, c2=1.0)
    held = 0
    n_val = 100
    for i in range(n_val):
        x = driver((602, i + 1))
        y0 = pool[i % len(pool)]
        held += lyapunov_check(vf, x, y0, GAMMA, 0.0, 1.0, C).holds
    assert held == n_val
    report(6, "lyapunov-inequality", f"C = {C:.3g}; held on {held}/{n_val} fresh paths")


def test_07_hitting():
    vf = running_field()
    phi = CutoffFunction(plateau=100.0, dim=1)

    # (a) analytic case, exact to 1e-8
    vf_id = VectorFieldPair(
        1, lambda y: np.zeros(1), lambda y: np.eye(1), lambda y: np.zeros((1, 1)),
        lambda y: np.zeros((1, 1, 1)), lambda y: np.zeros((1, 1, 1, 1)),
    )
    rp0 = lift_piecewise_linear(GridPath(TimeGrid(9), np.zeros(2**9 + 1)))
    res0 = solve_hitting(vf_id, np.zeros(1), np.ones(1), np.zeros((2**9, 1)), rp0, phi, 17)
    assert res0.hit_gap <= 1e-8

    # (b) scaled rough drivers: pin the largest scale with a perfect pilot
    # hit record, then verify fresh runs at that scale
    level = 10
    pinned_scale = None
    pinned_norm = 0.0
    for scale in (1.0, 0.5, 0.25):
        ok = True
        norms = []
        for i in range(100):
            rp = fbm_innovation_lift((701, i + 1), level, scale=scale, store=level)
            res = solve_hitting(
                vf, np.array([0.2]), np.array([-0.3]), np.zeros((2**level, 1)), rp, phi, 33
            )
            norms.append(rough_norm(rp, GAMMA))
            if res.hit_gap > 1e-3:
                ok = False
                break
        if ok:
            pinned_scale = scale
            pinned_norm = max(norms)
            break
    assert pinned_scale is not None
    worst = 0.0
    for i in range(100):
        rp = fbm_innovation_lift((702, i + 1), level, scale=pinned_scale, store=level)
        res = solve_hitting(
            vf, np.array([0.2]), np.array([-0.3]), np.zeros((2**level, 1)), rp, phi, 33
        )
        worst = max(worst, res.hit_gap)
    assert worst <= 1e-3

    # (c) tangent identity: measured xi-order between m = 17 and m = 33.
    # The endpoint gap drives the xi-curvature; a wide gap keeps the
    # O(dxi^2) term above the m-independent time-discretisation floor.
    errs = {}
    rp = fbm_innovation_lift((703, 1), 12, scale=0.3, store=12)
    for m in (17, 33):
        res = solve_hitting(
            vf, np.array([-1.5]), np.array([2.5]), np.zeros((2**12, 1)), rp, phi, m,
            keep_history=True,
        )
        t = res.grid.points
        dxi = res.xi[1] - res.xi[0]
        cdiff = (res.y_hist[:, 2:, 0] - res.y_hist[:, :-2, 0]) / (2 * dxi)
        target = res.j_hist[:, 1:-1, 0] * (1 - t)[:, None]
        errs[m] = np.abs(cdiff - target).max()
    order = math.log2(errs[17] / errs[33])
    assert order >= 1.8
    report(
        7, "hitting",
        f"analytic gap {res0.hit_gap:.1e}; 100/100 hits at norm <= {pinned_norm:.2f} "
        f"(worst fresh gap {worst:.1e}); xi-order {order:.2f} >= 1.8",
    )


def test_08_lambda_inversion():
    vf = running_field()
    cfg = cp.SchemeConfig(seed=801, horizon=10.0, level=9, t_past=256.0, burn_in=0.0)
    ctx = cp.CouplingContext(vf, cfg)
    worst = 0.0
    n_states = 0
    rng = rng_stream(801, 999)
    for i in range(100):
        state = cp.ReplicaState(ctx, i)
        state.Y = np.array([rng.uniform(-1.0, 1.0)])
        state.Ytil = state.Y + np.array([rng.uniform(-0.5, 0.5)])
        adm = cp.check_admissible(state)
        if not adm.admissible:
            continue
        n_states += 1
        w_incr = state.rng.standard_normal((cfg.unit_cells, 1)) * math.sqrt(cfg.h)
        fwd = cp.lambda_map(state, w_incr)
        if fwd.blowup:
            continue
        back = cp.lambda_inverse(state, fwd.wtil_incr)
        err = float(np.abs(np.cumsum(back.wtil_incr - w_incr, axis=0)).max())
        worst = max(worst, err)
    assert n_states >= 95
    assert worst <= 1e-5
    report(8, "lambda-inversion", f"{n_states} admissible states, max error {worst:.2e} <= 1e-5")


def test_09_girsanov_martingale():
    rng = rng_stream(901)
    h = 1.0 / 128
    t = np.arange(129) * h
    g = np.column_stack([np.sin(2 * math.pi * t)])
    n = 10**4
    acc = 0.0
    for _ in range(n):
        dw = rng.standard_normal((128, 1)) * math.sqrt(h)
        acc += cp.girsanov_density(g, dw, h)[0]
    mean = acc / n
    assert abs(mean - 1.0) <= 0.03
    report(9, "girsanov-martingale", f"E[D] = {mean:.4f} within 1 +- 0.03")


def test_10_drift_calculus_inversion(consts):
    # round trip on a smooth drift
    nodes = np.linspace(0.0, 1.0, 2**11 + 1)
    g = np.sin(math.pi * nodes)
    gw = gx_to_gw(nodes, g, nodes[1:], consts)
    gw_full = np.vstack([np.zeros((1, 1)), gw])
    probe = nodes[1:][nodes[1:] >= 0.05]
    back = gw_to_gx(nodes, gw_full, probe, consts)
    rt_err = float(np.abs(back[:, 0] - np.sin(math.pi * probe)).max())
    assert rt_err <= 1e-4

    # concatenated-drift inversion
    past_knots = np.linspace(-1.0, 0.0, 2**9 + 1)
    past_vals = np.sin(math.pi * past_knots) ** 2
    g1 = PastDrift(past_knots, past_vals)
    fwd_nodes = np.linspace(0.0, 1.0, 2**11 + 1)
    gx_plus = 0.5 * np.sin(math.pi * fwd_nodes)
    gw_plus = h_transform(g1, fwd_nodes, gx_plus, fwd_nodes[1:], consts)
    knots = np.concatenate([past_knots, fwd_nodes[1:]])
    vals = np.concatenate([past_vals[:, None], gw_plus], axis=0)
    gx_out = gw_to_gx(knots, vals, probe, consts)
    cat_err = float(np.abs(gx_out[:, 0] - 0.5 * np.sin(math.pi * probe)).max())
    assert cat_err <= 1e-3
    report(
        10, "drift-calculus-inversion",
        f"round trip {rt_err:.2e} <= 1e-4, concatenation {cat_err:.2e} <= 1e-3",
    )


def test_11_sewing_oracle():
    rng = rng_stream(1101)
    counts = {4: 370, 5: 200, 6: 130, 7: 110, 8: 80, 9: 60, 10: 50}
    assert sum(counts.values()) == 1000
    max_ratio = {}
    for level, n in counts.items():
        best = 0.0
        for _ in range(n):
            g = TimeGrid(level)
            data = rng.standard_normal((g.n_points, g.n_points))
            data[np.arange(g.n_points), np.arange(g.n_points)] = 0.0
            rep = sewing_check(Increment2(g, data), GAMMA, GAMMA, 1.0, 1.05)
            assert not rep.violation
            best = max(best, rep.ratio)
        max_ratio[level] = best
    assert max_ratio[10] <= 1.5 * max_ratio[4]
    report(
        11, "sewing-oracle",
        f"max ratio n=10 ({max_ratio[10]:.3f}) <= 1.5 x n=4 ({max_ratio[4]:.3f}), "
        "1000 increments",
    )


def test_12_marginal_laws():
    vf = running_field()
    cfg = cp.SchemeConfig(seed=1201, horizon=20.0, level=6, t_past=128.0, burn_in=2.0)
    ctx = cp.CouplingContext(vf, cfg)
    pw, pwt = [], []
    r = 0
    while sum(a.size for a in pw) < 10**4 and r < 40:
        tr = cp.run_scheme(vf, cfg, replica=r, collect_increments=True, ctx=ctx)
        if tr.pooled_w is not None:
            pw.append(tr.pooled_w)
            pwt.append(tr.pooled_wt)
        r += 1
    pw = np.concatenate(pw)[: 10**4]
    pwt = np.concatenate(pwt)[: 10**4]
    n = pw.size
    assert n == 10**4
    stats = {}
    for name, arr in (("W", pw), ("Wtilde", pwt)):
        mean, var = float(arr.mean()), float(arr.var())
        assert abs(mean) <= 3.0 / math.sqrt(n)
        assert abs(var - 1.0) <= 0.05
        stats[name] = (mean, var)
    report(
        12, "marginal-laws",
        f"W mean {stats['W'][0]:+.4f} var {stats['W'][1]:.3f}; "
        f"Wtilde mean {stats['Wtilde'][0]:+.4f} var {stats['Wtilde'][1]:.3f}",
    )


def test_13_end_to_end():
    # estimator validation on synthetic heavy-tailed data
    rng = rng_stream(1301)
    tau = rng.uniform(size=10**4) ** (-8.0)
    synth = cp.estimate_tail(tau, np.ones(tau.size, dtype=bool))
    assert abs(synth.slope + 0.125) <= 0.03

    # the experiment: 200 replicas to the horizon
    vf = running_field()
    cfg = cp.SchemeConfig(seed=1302, horizon=200.0, level=7)
    ctx = cp.CouplingContext(vf, cfg)
    traces = [cp.run_scheme(vf, cfg, r, ctx=ctx) for r in range(200)]
    coupled = sum(1 for t in traces if t.coupled)
    assert coupled >= 100  # >= 50% uncensored
    rep = cp.tail_from_traces(traces)
    assert np.all(np.diff(rep.survival) <= 1e-12)
    report(
        13, "end-to-end",
        f"synthetic slope {synth.slope:.4f} within -0.125 +- 0.03; "
        f"{coupled}/200 replicas coalesced; survival nonincreasing; "
        f"measured slope {rep.slope:.3f} +- {rep.slope_ci:.3f} (reported only)",
    )
