"""Command-line front end: run bundled or user experiment configs and write CSV artifacts.

Exit codes: 0 success, 1 tolerance failure, 2 parse error, 3 validation error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .analytic import MomentCurves, density_surface, mc_density, variance_curves
from .config import (
    COMMANDS,
    ConfigParseError,
    ConfigValidationError,
    ExperimentConfig,
    bundled_names,
    load_config,
    load_document,
    make_grid,
)
from .market import MarketModel, OptionSpec, default_y_grid, mc_price, solve_fundamental, solve_pde_constant
from .martingale import MeasureChangeSpec, martingale_residual, verify_measure_change
from .process import simulate_batch, simulate_path
from .switching import DomainError
from .volatility import hv_curve, mc_hv

EXIT_OK, EXIT_TOLERANCE, EXIT_PARSE, EXIT_VALIDATION = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def _mc_moment_checks(cfg: ExperimentConfig, curves: MomentCurves, times, n_paths: int):
    """Compare MC mean/variance at ``times`` with the curves (3 standard errors)."""
    regime = cfg.regime()
    rows, checks = [], {}
    for i in (0, 1):
        batch = simulate_batch(cfg.switching_model(i), regime, times, n_paths, cfg.seed + i)
        for k, t in enumerate(times):
            x = batch.X[:, k]
            n = len(x)
            m = float(x.mean())
            d = x - m
            var = float(np.mean(d * d)) * n / (n - 1)
            se_m = math.sqrt(var / n)
            se_v = math.sqrt(max(float(np.mean(d**4)) - var * var, 0.0) / n)
            mu = float(np.interp(t, curves.t, curves.mu(i)))
            sig = float(np.interp(t, curves.t, curves.sigma(i)))
            ok_m = abs(m - mu) <= 3 * se_m
            ok_v = abs(var - sig) <= 3 * se_v
            checks[f"mc_mean_state{i}_t{t:g}"] = ok_m
            checks[f"mc_var_state{i}_t{t:g}"] = ok_v
            rows.append({"state": i, "t": t, "mc_mean": m, "mc_mean_se": se_m, "mu": mu,
                         "mc_var": var, "mc_var_se": se_v, "sigma": sig})
    return rows, checks


def _task_hv(cfg, out: Path):
    task = cfg.task
    t = make_grid(task.get("t_grid", {"start": 1e-3, "stop": 10.0, "num": 200, "spacing": "log"}))
    regime, dists = cfg.regime(), cfg.dists()
    curve = hv_curve(regime, dists, t, method=task.get("method", "grid"), dt=task.get("dt"),
                     mode=task.get("mode", "exact"))
    io.write_columns(out / f"{cfg.prefix}_hv.csv", {"t": curve.t, "hv0": curve.hv0, "hv1": curve.hv1})
    results = {"t_max": float(t[-1]), "hv0_right": float(curve.hv0[-1]), "hv1_right": float(curve.hv1[-1])}
    checks = {"finite_positive": bool(np.all(np.isfinite(curve.hv0)) and np.all(np.isfinite(curve.hv1))
                                      and np.all(curve.hv0 > 0) and np.all(curve.hv1 > 0))}
    if curve.limits is not None:
        small0, small1, large = curve.limits
        results["limits"] = {"small_t_0": small0, "small_t_1": small1, "large_t": large}
        tol = task.get("large_t_rel_tol", 0.02)
        for i in (0, 1):
            checks[f"large_t_state{i}"] = abs(curve.hv(i)[-1] - large) / large <= tol
    if "mc_times" in task:
        times = np.asarray(task["mc_times"], float)
        rows = []
        for i in (0, 1):
            batch = simulate_batch(cfg.switching_model(i), regime, times, task.get("n_paths", 10**5), cfg.seed + i)
            ref = hv_curve(regime, dists, times, method=task.get("method", "grid"), dt=task.get("dt"))
            for k, tk in enumerate(times):
                hv, se = mc_hv(batch, k)
                checks[f"mc_hv_state{i}_t{tk:g}"] = abs(hv - ref.hv(i)[k]) <= 3 * se
                rows.append({"state": i, "t": float(tk), "mc_hv": hv, "se": se, "hv": float(ref.hv(i)[k])})
        results["mc"] = rows
    return results, checks


def _task_moments(cfg, out: Path):
    task = cfg.task
    curves = variance_curves(cfg.regime(), cfg.dists(), task.get("t_max", 5.0), task.get("dt", 1e-3),
                             method=task.get("method", "grid"), mode=task.get("mode", "exact"))
    io.write_columns(out / f"{cfg.prefix}_moments.csv",
                     {"t": curves.t, "mu0": curves.mu0, "mu1": curves.mu1,
                      "sigma0": curves.sigma0, "sigma1": curves.sigma1})
    results = {"t_max": float(curves.t[-1]), "mu0_end": float(curves.mu0[-1]), "sigma0_end": float(curves.sigma0[-1])}
    checks = {"nonnegative_variance": bool(np.all(curves.sigma0 >= 0) and np.all(curves.sigma1 >= 0))}
    if "mc_times" in task:
        rows, mc_checks = _mc_moment_checks(cfg, curves, np.asarray(task["mc_times"], float),
                                            task.get("n_paths", 10**5))
        results["mc"] = rows
        checks.update(mc_checks)
    return results, checks


def _task_density(cfg, out: Path):
    task = cfg.task
    t = float(task.get("t", 0.5))
    s = float(task.get("s", 0.0))
    regime, dists = cfg.regime(), cfg.dists()
    surf = density_surface(regime, dists, t, s=s, dt=task.get("dt", 2e-3), n_x=task.get("n_x", 1201))
    x = surf.x_grid
    tt = np.full(len(x), surf.t_grid[-1])
    io.write_columns(out / f"{cfg.prefix}_density.csv", {"t": tt, "x": x, "p0": surf.p0[-1], "p1": surf.p1[-1]})
    for i in (0, 1):
        atoms = surf.singular_atoms[i]
        times = surf.t_grid if len(atoms) == len(surf.t_grid) else surf.t_grid[-1:]
        io.write_columns(out / f"{cfg.prefix}_atoms{i}.csv",
                         {"t": times, "atom_x": [a[0] for a in atoms], "atom_mass": [a[1] for a in atoms]})
    mass = [float(surf.total_mass(i)[-1]) for i in (0, 1)]
    tol = task.get("tolerance", 1e-4)
    results = {"t": t, "s": s, "total_mass": mass, "atom_mass": [surf.singular_atoms[i][-1][1] for i in (0, 1)]}
    checks = {f"mass_state{i}": abs(mass[i] - 1.0) <= tol for i in (0, 1)}
    if "n_paths" in task:
        for i in (0, 1):
            mc = mc_density(cfg.switching_model(i), regime, t, surf.x_edges, task["n_paths"], cfg.seed + i, s=s)
            atom = surf.singular_atoms[i][-1][1]
            checks[f"mc_atom_state{i}"] = abs(mc.atom_fraction - atom) <= 3 * mc.atom_standard_error
            results[f"mc_atom_state{i}"] = {"fraction": mc.atom_fraction, "se": mc.atom_standard_error}
    return results, checks


def _task_martingale(cfg, out: Path):
    task = cfg.task
    t = make_grid(task.get("t_grid", {"start": 0.0, "stop": 2.0, "num": 201}))
    rep = martingale_residual(cfg.regime(), cfg.dists(), t)
    io.write_columns(out / f"{cfg.prefix}_residuals.csv", {"t": t, "residual0": rep.residual0, "residual1": rep.residual1})
    tol = task.get("tolerance", 1e-8)
    results = {"max_abs_residual": rep.max_abs_residual, "divergence_check": list(rep.divergence_check),
               "sign_violations": [len(v) for v in rep.sign_violations]}
    return results, {"martingale": rep.max_abs_residual <= tol}


def _task_measure(cfg, out: Path):
    task = cfg.task
    m = task.get("measure")
    if m is None:
        raise ConfigValidationError("task/measure is required for measure-check")
    spec = MeasureChangeSpec(m["mu"][0], m["mu"][1], m["lambda"][0], m["lambda"][1])
    rep = verify_measure_change(spec, cfg.regime(), task.get("horizon", 1.0), task.get("n_paths", 10**5), cfg.seed,
                                cfg.model.get("initial_state", 0))
    rows = [
        ("weight_mean", rep.weight_mean, rep.weight_se),
        ("effective_sample_size", rep.ess, float("nan")),
        ("weighted_mean_X", rep.weighted_mean_x, rep.weighted_mean_x_se),
        ("direct_mean_X", rep.direct_mean_x, rep.direct_mean_x_se),
        ("sojourn_ks_p_state0", rep.sojourn_ks[0][2], float("nan")),
        ("sojourn_ks_p_state1", rep.sojourn_ks[1][2], float("nan")),
        ("distribution_ks_p", rep.distribution_ks[2], float("nan")),
    ]
    io.write_csv(out / f"{cfg.prefix}_measure.csv", ["quantity", "value", "standard_error"], rows)
    return {r[0]: r[1] for r in rows}, dict(rep.checks)


def _task_price(cfg, out: Path):
    task = cfg.task
    o = task.get("option", {"payoff": "call", "strike": 1.0, "maturity": 1.0})
    option = OptionSpec(o["payoff"], o.get("strike", 1.0), o["maturity"])
    spot = cfg.model.get("spot", 1.0)
    market = MarketModel(spot, cfg.regime(), cfg.dists(), cfg.rate_regime())
    y = default_y_grid(spot, task.get("log_width", 1.0), task.get("n_y", 801))
    spots = task.get("spots", [spot])
    rows, values = [], {}
    for method in task.get("methods", ["pde", "fundamental", "mc"]):
        if method == "mc":
            res = mc_price(market, option, task.get("n_paths", 10**5), cfg.seed)
            for r in res:
                rows.append(("mc", r.state, spot, 0.0, r.price))
                rows.append(("mc_se", r.state, spot, 0.0, r.standard_error))
                values[("mc", r.state)] = (r.price, r.standard_error)
            continue
        if method == "pde":
            surf = solve_pde_constant(market, option, y, dt=task.get("dt", 2e-3))
        else:
            surf = solve_fundamental(market, option, y, dt=task.get("dt", 5e-3))
        for i in (0, 1):
            for sp in spots:
                v = surf.value_at(sp, 0.0, i)
                rows.append((method, i, sp, 0.0, v))
                if sp == spot:
                    values[(method, i)] = (v, 0.0)
    io.write_csv(out / f"{cfg.prefix}_price.csv", ["method", "state", "spot", "t", "value"], rows)
    tol = task.get("tolerance", 0.01)
    checks = {}
    for i in (0, 1):
        if ("pde", i) in values and ("fundamental", i) in values:
            a, b = values[("pde", i)][0], values[("fundamental", i)][0]
            checks[f"pde_vs_fundamental_state{i}"] = abs(a - b) <= tol * abs(a)
        ref = values.get(("pde", i)) or values.get(("fundamental", i))
        if ("mc", i) in values and ref is not None:
            p, se = values[("mc", i)]
            checks[f"mc_state{i}"] = abs(p - ref[0]) <= 3 * se
    results = {f"{m}_state{i}": v[0] for (m, i), v in values.items()}
    return results, checks


def _task_simulate(cfg, out: Path):
    task = cfg.task
    horizon = task.get("horizon", 1.0)
    grid = make_grid(task.get("t_grid", {"start": 0.0, "stop": horizon, "num": 101}))
    spot = cfg.model.get("spot", 1.0)
    rec = simulate_path(cfg.switching_model(), cfg.regime(), horizon, grid, cfg.seed, task.get("replication", 0))
    S = spot * np.exp(rec.drift) * rec.kappa
    io.write_columns(out / f"{cfg.prefix}_path.csv",
                     {"t": rec.sample_times, "state": rec.states, "X": rec.X, "kappa": rec.kappa, "S": S})
    results = {"n_switches": int(rec.flow.n_switches), "X_end": float(rec.X[-1])}
    checks = {}
    if "n_paths" in task:
        times = np.asarray(task.get("mc_times", [horizon]), float)
        batch = simulate_batch(cfg.switching_model(), cfg.regime(), times, task["n_paths"], cfg.seed)
        results["mc_mean"] = batch.X.mean(axis=0).tolist()
        results["mc_var"] = batch.X.var(axis=0, ddof=1).tolist()
    return results, checks


_TASKS = {
    "hv": _task_hv,
    "moments": _task_moments,
    "density": _task_density,
    "martingale-check": _task_martingale,
    "measure-check": _task_measure,
    "price": _task_price,
    "simulate": _task_simulate,
}


def run(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Execute one experiment, write its artifacts and return the run report."""
    out = Path(out_dir if out_dir is not None else cfg.output.get("dir", "."))
    start = time.perf_counter()
    results, checks = _TASKS[cfg.command](cfg, out)
    report = {
        "task": cfg.name,
        "command": cfg.command,
        "seed": cfg.seed,
        "wall_time": round(time.perf_counter() - start, 3),
        "results": results,
        "checks": {k: bool(v) for k, v in checks.items()},
        "passed": all(bool(v) for v in checks.values()),
    }
    io.write_report(out / f"{cfg.prefix}_report.json", report)
    return report


def list_experiments() -> list[tuple[str, str, str]]:
    out = []
    for name in bundled_names():
        doc = load_document(name)
        out.append((name, doc["task"]["command"], doc.get("description", "")))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jumptelegraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def add_common(p):
        p.add_argument("config", help="config file (path, or name of a bundled config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. task.seed=7 (repeatable)")
        p.add_argument("--out", default=None, help="output directory (default: output.dir or .)")
        p.add_argument("--seed", type=int, default=None, help="override task.seed")

    add_common(sub.add_parser("run", help="run the task named in the config"))
    for name in COMMANDS:
        add_common(sub.add_parser(name, help=f"run the config as a {name} task"))
    sub.add_parser("list", help="list bundled experiment configs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "list":
        for name, command, desc in list_experiments():
            print(f"{name:28s} {command:17s} {desc}")
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.overrides, args.seed, None if args.cmd == "run" else args.cmd)
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = run(cfg, args.out)
    except (ConfigValidationError, DomainError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    summary = {k: report[k] for k in ("task", "command", "passed")}
    summary["results"] = report["results"]
    print(json.dumps(summary, sort_keys=True, default=io._json_default))
    if not report["passed"]:
        failed = [k for k, v in report["checks"].items() if not v]
        print(f"tolerance failure: {', '.join(failed)}", file=sys.stderr)
        return EXIT_TOLERANCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
