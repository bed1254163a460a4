"""Experiment driver: config parsing, subcommands, reproducible artifacts.

Configuration is a flat key=value file (one pair per line, # comments);
unknown keys are rejected.  Numeric CSV output carries 17 significant
digits and no timestamps, so identical (config, seed) pairs produce
byte-identical artifacts.  Replicas draw from counter-based streams
keyed by (seed, replica index), which makes parallel dispatch
order-independent.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import coupling as cp
from . import fbm, fraccalc, grid, lyapunov, rde, roughpath

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


# one registered vector field keeps replica dispatch picklable
def mean_reversion_sine(dim: int = 1) -> rde.VectorFieldPair:
    """The running example: b = -y, sigma = 2 + sin(y) (componentwise)."""

    def b(y):
        return -y

    def sigma(y):
        return np.diag(2.0 + np.sin(y))

    def db(y):
        return -np.eye(dim)

    def dsigma(y):
        out = np.zeros((dim, dim, dim))
        for i in range(dim):
            out[i, i, i] = math.cos(y[i])
        return out

    def d2sigma(y):
        out = np.zeros((dim, dim, dim, dim))
        for i in range(dim):
            out[i, i, i, i] = -math.sin(y[i])
        return out

    return rde.VectorFieldPair(dim, b, sigma, db, dsigma, d2sigma)


FIELDS = {"mean-reversion-sine": mean_reversion_sine}

CONFIG_KEYS = {
    "hurst": (float, 0.4),
    "gamma": (float, 0.35),
    "alpha": (float, 0.10),
    "beta": (float, 1.6),
    "varsigma": (float, 1.3),
    "epsilon": (float, 0.5),
    "big_k": (float, 20.0),
    "c2_alpha_k": (float, 1.0),
    "c2": (float, None),
    "c3": (float, None),
    "plateau": (float, 200.0),
    "hit_tol": (float, 5e-3),
    "level": (int, 7),
    "sub_level": (int, 12),
    "m_xi": (int, 33),
    "t_past": (float, 2.0**10),
    "horizon": (float, 200.0),
    "dim": (int, 1),
    "y_init": (float, 2.0),
    "ytil_init": (float, -2.0),
    "burn_in": (float, 8.0),
    "seed": (int, 0),
    "replicas": (int, 8),
    "samples": (int, 50),
    "threads": (int, 1),
    "field": (str, "mean-reversion-sine"),
    "out": (str, "out"),
}


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            typ, _ = CONFIG_KEYS[key]
            try:
                out[key] = typ(val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def resolve_settings(args) -> dict:
    cfg = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    if args.config:
        cfg.update(parse_config_file(args.config))
    for key in ("seed", "out", "replicas", "level", "threads"):
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            cfg[key] = v
    if cfg["out"] == "out" and os.environ.get("ROUGHCOUPLE_OUT"):
        cfg["out"] = os.environ["ROUGHCOUPLE_OUT"]
    return cfg


def scheme_config(cfg: dict) -> cp.SchemeConfig:
    try:
        return cp.SchemeConfig(
            H=cfg["hurst"], gamma=cfg["gamma"], alpha=cfg["alpha"], beta=cfg["beta"],
            varsigma=cfg["varsigma"], epsilon=cfg["epsilon"], K=cfg["big_k"],
            C2_alpha_K=cfg["c2_alpha_k"], c2=cfg["c2"], c3=cfg["c3"],
            plateau=cfg["plateau"], hit_tol=cfg["hit_tol"], level=cfg["level"],
            m_xi=cfg["m_xi"], t_past=cfg["t_past"], horizon=cfg["horizon"],
            d=cfg["dim"], y_init=cfg["y_init"], ytil_init=cfg["ytil_init"],
            burn_in=cfg["burn_in"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _outdir(cfg, sub):
    path = os.path.join(cfg["out"], sub)
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample_fbm(cfg):
    w = fbm.sample_wiener(cfg["seed"], cfg["t_past"], 1.0, cfg["level"], cfg["dim"])
    scen = fbm.fbm_from_wiener(w, cfg["hurst"])
    out = _outdir(cfg, "fbm")
    scen.export(out)
    print(f"scenario written to {out}")
    return EXIT_OK


def cmd_lift(cfg):
    w = fbm.sample_wiener(cfg["seed"], cfg["t_past"], 1.0, cfg["sub_level"], cfg["dim"])
    scen = fbm.fbm_from_wiener(w, cfg["hurst"])
    rp = roughpath.lift_piecewise_linear(scen.X, min(cfg["level"], cfg["sub_level"]))
    out = _outdir(cfg, "lift")
    rp.path.to_csv(os.path.join(out, "path.csv"))
    rp.export_area_csv(os.path.join(out, "area.csv"))
    print(f"lift written to {out} (chen defect {roughpath.chen_defect(rp):.3e})")
    return EXIT_OK


def cmd_solve(cfg):
    vf = FIELDS[cfg["field"]](cfg["dim"])
    w = fbm.sample_wiener(cfg["seed"], cfg["t_past"], 1.0, cfg["sub_level"], cfg["dim"])
    scen = fbm.fbm_from_wiener(w, cfg["hurst"])
    rp = roughpath.lift_piecewise_linear(scen.X, min(cfg["level"], cfg["sub_level"]))
    sol = rde.davie_solve(vf, rp, np.full(cfg["dim"], cfg["y_init"]))
    out = _outdir(cfg, "solve")
    sol.to_csv(os.path.join(out, "solution.csv"))
    print(f"solution written to {out}")
    return EXIT_OK


def cmd_lyapunov(cfg):
    vf = FIELDS[cfg["field"]](cfg["dim"])
    n = cfg["samples"]
    drivers = []
    rows = []
    for i in range(n):
        rng = fbm.rng_stream(cfg["seed"], i + 1)
        w = fbm.sample_wiener(rng, cfg["t_past"], 1.0, cfg["sub_level"], cfg["dim"])
        scen = fbm.fbm_from_wiener(w, cfg["hurst"])
        drivers.append(roughpath.lift_piecewise_linear(scen.X, min(cfg["level"], 9)))
    pool = [np.full(cfg["dim"], v) for v in (-3.0, -1.0, -0.3, 0.0, 0.3, 1.0, 3.0)]
    cal = lyapunov.scale_augmented(drivers[: max(4, n // 4)])
    C = lyapunov.fit_lyapunov_constant(vf, cal, pool, cfg["gamma"], c2=1.0)
    holds = 0
    for i, x in enumerate(drivers):
        rep = lyapunov.lyapunov_check(vf, x, pool[i % len(pool)], cfg["gamma"], 0.0, 1.0, C)
        holds += rep.holds
        rows.append([i, rep.driver_norm, rep.y0_sq, rep.y1_sq, rep.residual])
    out = _outdir(cfg, "lyapunov")
    lyapunov.export_reports(os.path.join(out, "reports.csv"), rows)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"C": C, "validated": holds, "total": n}, fh, indent=2, sort_keys=True)
    print(f"lyapunov: C = {C:.4g}, inequality held on {holds}/{n} samples")
    return EXIT_OK if holds == n else EXIT_NUMERICAL


def cmd_hit(cfg):
    vf = FIELDS[cfg["field"]](cfg["dim"])
    sch = scheme_config(cfg)
    ctx = cp.CouplingContext(vf, sch)
    state = cp.ReplicaState(ctx, 0)
    state.Ytil = state.Y + 1.0
    n = sch.unit_cells
    w_incr = state.window_incr(0, n).copy()
    vals = np.zeros((n + 1, cfg["dim"]))
    np.cumsum(w_incr, axis=0, out=vals[1:])
    z = fbm.dx_plus(grid.GridPath(ctx.unit_grid, vals), sch.H, ctx.alpha_H)
    rp = roughpath.lift_piecewise_linear(z)
    d_vals, _ = fbm.past_component(
        state.w, 0.0, ctx.t_nodes, alpha_H=ctx.alpha_H, H=sch.H, anchor=True
    )
    h_incr = np.diff(np.vstack([np.zeros((1, cfg["dim"]))] + [d_vals]), axis=0)
    res = rde.solve_hitting(
        vf, state.Y, state.Ytil, h_incr, rp, ctx.phi, sch.m_xi, keep_history=True
    )
    out = _outdir(cfg, "hit")
    res.export_csv(os.path.join(out, "hitting.csv"))
    grid.write_csv(
        os.path.join(out, "gx.csv"),
        ["t"] + [f"g{i+1}" for i in range(cfg["dim"])],
        np.column_stack([res.grid.points, res.g_x]),
    )
    print(f"hitting written to {out} (endpoint gap {res.hit_gap:.3e})")
    return EXIT_OK


def _one_replica(payload):
    cfg, replica = payload
    vf = FIELDS[cfg["field"]](cfg["dim"])
    sch = scheme_config(cfg)
    return cp.run_scheme(vf, sch, replica)


def run_couple(cfg):
    n = cfg["replicas"]
    payloads = [(cfg, r) for r in range(n)]
    if cfg["threads"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["threads"]) as ex:
            traces = list(ex.map(_one_replica, payloads))
    else:
        vf = FIELDS[cfg["field"]](cfg["dim"])
        sch = scheme_config(cfg)
        ctx = cp.CouplingContext(vf, sch)
        traces = [cp.run_scheme(vf, sch, r, ctx=ctx) for r in range(n)]
    return traces


def cmd_couple(cfg):
    traces = run_couple(cfg)
    out = _outdir(cfg, "couple")
    summary = []
    for tr in traces:
        tr.export_csv(os.path.join(out, f"trace_{tr.replica:04d}.csv"))
        summary.append(
            {"replica": tr.replica, "tau_inf": tr.tau_inf, "censored": tr.censored}
        )
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    coupled = sum(1 for t in traces if t.coupled)
    print(f"couple: {coupled}/{len(traces)} replicas coalesced; artifacts in {out}")
    return EXIT_OK


def cmd_rate(cfg):
    traces = run_couple(cfg)
    coupled = sum(1 for t in traces if t.coupled)
    if coupled == 0:
        print("rate: all replicas censored", file=sys.stderr)
        return EXIT_NUMERICAL
    rep = cp.tail_from_traces(traces)
    out = _outdir(cfg, "rate")
    rep.export_csv(os.path.join(out, "tail.csv"))
    with open(os.path.join(out, "slope.json"), "w") as fh:
        json.dump(
            {
                "slope": rep.slope,
                "slope_ci_95": rep.slope_ci,
                "n_events": rep.n_events,
                "n_censored": rep.n_censored,
                "note": rep.note,
            },
            fh, indent=2, sort_keys=True,
        )
    print(
        f"rate: {coupled}/{len(traces)} coalesced; fitted log-log slope "
        f"{rep.slope:.3f} +- {rep.slope_ci:.3f} (reported, not asserted)"
    )
    return EXIT_OK


def cmd_verify(cfg):
    checks = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - reported, not hidden
            ok, detail = False, f"exception: {exc}"
        checks.append((name, ok, detail))

    H = cfg["hurst"]

    def chen():
        worst = 0.0
        for i in range(10):
            rng = fbm.rng_stream(cfg["seed"], i + 1)
            w = fbm.sample_wiener(rng, 256.0, 1.0, 12, 2)
            scen = fbm.fbm_from_wiener(w, H)
            rp = roughpath.lift_piecewise_linear(scen.X, 8)
            scale = 1.0 + scen.X.sup_norm() ** 2
            worst = max(worst, roughpath.chen_defect(rp) / scale,
                        roughpath.symmetric_part_defect(rp) / scale)
        return worst <= 1e-10, f"max scaled defect {worst:.2e}"

    def davie_benchmark():
        vf = rde.VectorFieldPair(
            1, lambda y: np.zeros(1), lambda y: np.array([[y[0]]]),
            lambda y: np.zeros((1, 1)), lambda y: np.ones((1, 1, 1)),
            lambda y: np.zeros((1, 1, 1, 1)),
        )
        fine = grid.TimeGrid(14)
        rp = roughpath.lift_piecewise_linear(grid.GridPath(fine, np.sin(fine.points)), 12)
        y1 = rde.davie_solve(vf, rp, np.ones(1)).values[-1, 0]
        err = abs(y1 - math.exp(math.sin(1.0)))
        return err <= 1e-3, f"|y1 - e^sin 1| = {err:.2e}"

    def cocycle():
        rng = fbm.rng_stream(cfg["seed"], 99)
        g = grid.TimeGrid(5)
        f = grid.GridPath(g, rng.standard_normal((g.n_points, 2)))
        val = grid.delta2(grid.delta1(f)).max_abs()
        tol = 4 * np.finfo(float).eps * np.abs(f.values).max()
        return val <= tol, f"max |delta2 delta1| = {val:.2e}"

    def calibration():
        alpha_H = fbm.alpha_for_unit_variance(H, cfg["level"])
        c = fraccalc.calibrate_constants(H, alpha_H)
        ok = c.roundtrip_residual < 1e-4 and c.continuation_residual < 1e-3
        return ok, (
            f"roundtrip {c.roundtrip_residual:.1e}, continuation {c.continuation_residual:.1e}"
        )

    def girsanov():
        rng = fbm.rng_stream(cfg["seed"], 7)
        h = 1.0 / 64
        t = np.arange(65) * h
        g = np.sin(2 * math.pi * t)[:, None]
        acc = 0.0
        n = 2000
        for _ in range(n):
            dw = rng.standard_normal((64, 1)) * math.sqrt(h)
            acc += cp.girsanov_density(g, dw, h)[0]
        err = abs(acc / n - 1.0)
        return err < 0.05, f"|E D - 1| = {err:.3f}"

    def sewing():
        rng = fbm.rng_stream(cfg["seed"], 13)
        worst = {}
        for level in (4, 6, 8):
            best = 0.0
            for _ in range(60):
                g = grid.TimeGrid(level)
                data = rng.standard_normal((g.n_points, g.n_points))
                data[np.arange(g.n_points), np.arange(g.n_points)] = 0.0
                rep = grid.sewing_check(grid.Increment2(g, data), 0.35, 0.35, 1.0, 1.1)
                best = max(best, rep.ratio)
            worst[level] = best
        ok = worst[8] <= 1.5 * worst[4]
        return ok, f"max ratios {worst}"

    def hitting_exact():
        vf = rde.VectorFieldPair(
            1, lambda y: np.zeros(1), lambda y: np.eye(1), lambda y: np.zeros((1, 1)),
            lambda y: np.zeros((1, 1, 1)), lambda y: np.zeros((1, 1, 1, 1)),
        )
        phi = rde.CutoffFunction(50.0, 1)
        rp = roughpath.lift_piecewise_linear(
            grid.GridPath(grid.TimeGrid(8), np.zeros(2**8 + 1))
        )
        res = rde.solve_hitting(
            vf, np.zeros(1), np.ones(1), np.zeros((2**8, 1)), rp, phi, 17
        )
        return res.hit_gap <= 1e-8, f"analytic hit gap {res.hit_gap:.2e}"

    def lambda_roundtrip():
        vf = FIELDS[cfg["field"]](cfg["dim"])
        sch = scheme_config({**cfg, "level": 6, "horizon": 10.0, "t_past": 64.0})
        ctx = cp.CouplingContext(vf, sch)
        state = cp.ReplicaState(ctx, 0)
        state.Ytil = state.Y + 0.4
        worst = 0.0
        for _ in range(3):
            w_incr = state.rng.standard_normal((sch.unit_cells, cfg["dim"])) * math.sqrt(sch.h)
            fwd = cp.lambda_map(state, w_incr)
            back = cp.lambda_inverse(state, fwd.wtil_incr)
            worst = max(worst, float(np.abs(np.cumsum(back.wtil_incr - w_incr, axis=0)).max()))
        return worst <= 1e-5, f"max inversion error {worst:.2e}"

    def pareto_tail():
        rng = fbm.rng_stream(cfg["seed"], 23)
        tau = rng.uniform(size=4000) ** (-8.0)
        rep = cp.estimate_tail(tau, np.ones(4000, dtype=bool))
        ok = abs(rep.slope + 0.125) <= 0.05 and np.all(np.diff(rep.survival) <= 1e-12)
        return ok, f"fitted slope {rep.slope:.4f}"

    check("chen-relation", chen)
    check("davie-benchmark", davie_benchmark)
    check("cocycle-identity", cocycle)
    check("drift-calculus-calibration", calibration)
    check("girsanov-martingale", girsanov)
    check("sewing-ratio-stability", sewing)
    check("hitting-analytic", hitting_exact)
    check("coupling-map-inversion", lambda_roundtrip)
    check("tail-estimator-pareto", pareto_tail)

    width = max(len(n) for n, _, _ in checks)
    all_ok = True
    for name, ok, detail in checks:
        all_ok &= ok
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return EXIT_OK if all_ok else EXIT_NUMERICAL


COMMANDS = {
    "sample-fbm": cmd_sample_fbm,
    "lift": cmd_lift,
    "solve": cmd_solve,
    "lyapunov": cmd_lyapunov,
    "hit": cmd_hit,
    "couple": cmd_couple,
    "rate": cmd_rate,
    "verify": cmd_verify,
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="roughcouple",
        description="Rough-path coupling experiments for fractional SDEs",
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="flat key=value config file")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--replicas", type=int, metavar="N")
    p.add_argument("--level", type=int, metavar="N")
    p.add_argument("--threads", type=int, metavar="N")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_settings(args)
        scheme_config(cfg)  # validates ranges early for every command
        code = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (rde.SolverBlowUp, RuntimeError) as exc:
        report = {"error": type(exc).__name__, "detail": str(exc)}
        if isinstance(exc, rde.SolverBlowUp):
            report["step"] = exc.step
        print(json.dumps(report, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERICAL
    return code


if __name__ == "__main__":
    sys.exit(main())
