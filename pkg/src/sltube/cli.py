"""Command line front end: ``solve``, ``roa``, ``montecarlo`` and ``verify``.

Exit codes: 0 success, 1 error (bad config, solver failure, too many failed
runs), 2 infeasible problem (``solve``), 3 certification failure (``verify``).
"""
import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .controllers import Kind, MpcController, policy_parameter_counts, policy_variable_count
from .experiment import ConfigError, ExperimentConfig, ResultBundle
from .qp import Status
from .sim import (monte_carlo, roa_estimate, theta_sweep, trace_csv, write_json,
                  zero_threshold)

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_CERT = 0, 1, 2, 3


def _fmt(theta):
    return "none" if theta is None else f"{theta:.3f}"


def _parse_x0(text, n):
    try:
        x0 = np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise ConfigError(f"--x0 must be comma separated numbers, got {text!r}")
    if x0.size != n:
        raise ConfigError(f"--x0 has {x0.size} entries, the state has {n}")
    return x0


def _load(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.bundled()
    out = Path(args.out or cfg.data.get("output_dir", "results"))
    return cfg, out


def _controller(cfg, prob, kind, solver):
    K = cfg.tube_gain(prob) if Kind(kind) is Kind.TUBE else None
    return MpcController(prob, kind, K=K, solver=solver)


# ------------------------------------------------------------------ commands


def cmd_solve(args):
    cfg, out = _load(args)
    prob = cfg.problem()
    x0 = _parse_x0(args.x0, prob.n) if args.x0 else np.array(cfg.data.get("x0"), float)
    solver = cfg.solver(args.tol)
    kinds = [args.controller] if args.controller else cfg.controllers
    bundle = ResultBundle("solve", cfg, out, solver.settings())
    code = EXIT_OK
    for kind in kinds:
        ctrl = _controller(cfg, prob, kind, solver)
        res = ctrl.solve(x0)
        row = {"controller": kind, "theta": cfg.theta, "x0": x0.tolist(),
               "status": res.status.value, "objective": res.objective,
               "first_input": None if res.first_input is None else np.ravel(res.first_input).tolist(),
               "policy_variables": policy_parameter_counts(kind, prob.n, prob.m, prob.N),
               "diagnostics": {k: v for k, v in res.diagnostics.items()
                               if isinstance(v, (int, float, str, bool, dict))}}
        if ctrl.K is not None:
            row["tube_gain"] = ctrl.K.tolist()
        if ctrl.var_map is not None:
            row["registered_policy_variables"] = policy_variable_count(ctrl.var_map, kind)
        if res.optimal:
            print(f"{kind}: Optimal  objective {res.objective:.6f}  first input "
                  f"{np.array2string(np.ravel(res.first_input), precision=6)}")
        else:
            print(f"{kind}: {res.status.value}")
        name = f"solve_{kind}_theta{_fmt(cfg.theta)}.json"
        write_json(row, bundle.path(name))
        bundle.add_file(name)
        bundle.summaries.append({k: row[k] for k in ("controller", "theta", "status", "objective")})
        if res.status is Status.SOLVER_ERROR:
            code = EXIT_ERROR
        elif res.status is Status.INFEASIBLE and code == EXIT_OK:
            code = EXIT_INFEASIBLE
    bundle.complete = True
    bundle.write()
    return code


def cmd_roa(args):
    cfg, out = _load(args)
    solver_tol = args.tol
    roa = cfg.data.get("roa", {})
    thetas = roa.get("thetas", [cfg.theta])
    res = int(roa.get("resolution", 50))
    bundle = ResultBundle("roa", cfg, out, cfg.solver(solver_tol).settings())
    try:
        coverage = []
        for th in thetas:
            prob = cfg.problem(th)
            for kind in cfg.controllers:
                K = cfg.tube_gain(prob) if Kind(kind) is Kind.TUBE else None
                t0 = time.perf_counter()
                grid = roa_estimate(kind, prob, res, workers=args.threads, K=K, theta=th)
                name = f"roa_{kind}_theta{_fmt(th)}_res{res}.csv"
                grid.write_csv(bundle.path(name))
                bundle.add_file(name)
                coverage.append({"controller": kind, "theta": th, "resolution": res,
                                 "coverage_percent": grid.coverage_percent,
                                 "solver_errors": grid.n_errors,
                                 "seconds": time.perf_counter() - t0})
                print(f"{kind:7s} theta {th:.3f}  coverage {grid.coverage_percent:6.2f} %")
        write_json(coverage, bundle.path("coverage.json"))
        bundle.add_file("coverage.json")
        bundle.summaries += coverage

        sweep = roa.get("sweep_thetas")
        if sweep:
            sres = int(roa.get("sweep_resolution", 30))
            base = cfg.problem()
            curves, thresholds = {}, {}
            for kind in cfg.controllers:
                gain = (lambda p: cfg.tube_gain(p)) if Kind(kind) is Kind.TUBE else None
                curves[kind] = theta_sweep(kind, base, sorted(sweep), sres,
                                           disturbance=cfg.disturbance, workers=args.threads,
                                           gain=gain)
                thresholds[kind] = zero_threshold(curves[kind])
                print(f"{kind:7s} coverage reaches 0 % at theta = {thresholds[kind]}")
            name = f"coverage_curve_res{sres}.csv"
            with open(bundle.path(name), "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["theta"] + list(curves))
                for i, th in enumerate(sorted(sweep)):
                    w.writerow([th] + [curves[k][i]["coverage"] for k in curves])
            bundle.add_file(name)
            write_json({"thresholds": thresholds, "resolution": sres,
                        "curves": curves}, bundle.path("thresholds.json"))
            bundle.add_file("thresholds.json")
            write_json({"kind": "line", "x": "theta", "y": list(curves),
                        "data": name, "ylabel": "coverage [%]"}, bundle.path("plot_coverage.json"))
            bundle.add_file("plot_coverage.json")
        bundle.complete = True
    except KeyboardInterrupt:
        print("interrupted; partial results kept", file=sys.stderr)
        bundle.notes["interrupted"] = True
        bundle.write()
        return EXIT_ERROR
    bundle.write()
    return EXIT_OK


def cmd_montecarlo(args):
    cfg, out = _load(args)
    mc = cfg.data.get("montecarlo", {})
    runs = args.runs or int(mc.get("runs", 100))
    seed = args.seed if args.seed is not None else int(mc.get("seed", 0))
    horizon = mc.get("horizon", "policy")
    prob = cfg.problem()
    x0 = np.array(cfg.data.get("x0"), float)
    solver = cfg.solver(args.tol)
    bundle = ResultBundle("montecarlo", cfg, out, solver.settings())
    stats, fail_total = [], 0
    per_run = f"montecarlo_runs_theta{_fmt(cfg.theta)}_seed{seed}.csv"
    fan = f"montecarlo_fan_theta{_fmt(cfg.theta)}_seed{seed}.csv"
    with open(bundle.path(per_run), "w", newline="") as fr, \
            open(bundle.path(fan), "w", newline="") as ff:
        wr, wf = csv.writer(fr), csv.writer(ff)
        wr.writerow(["controller", "run", "total_cost", "violations"])
        wf.writerow(["controller", "run", "step"] + [f"x{i + 1}" for i in range(prob.n)])
        for kind in cfg.controllers:
            K = cfg.tube_gain(prob) if Kind(kind) is Kind.TUBE else None
            t0 = time.perf_counter()
            r = monte_carlo(kind, prob, x0, mc.get("T"), runs, seed, K=K,
                            sampling=mc.get("sampling", "uniform"), workers=args.threads,
                            theta=cfg.theta, keep_traces=True, horizon=horizon)
            wall = time.perf_counter() - t0
            for i, tr in enumerate(r.traces):
                wr.writerow([kind, i, repr(tr.total_cost), len(tr.violations)])
                for k, x in enumerate(tr.states):
                    wf.writerow([kind, i, k] + [repr(float(v)) for v in x])
            s = r.summary()
            stats.append(s)
            fail_total = max(fail_total, r.failures)
            bundle.notes[f"timing_{kind}_seconds"] = wall
            print(f"{kind:7s} mean {r.mean_cost:8.4f}  std {r.std_cost:7.4f}  "
                  f"violations {r.violations}  failures {r.failures}/{runs}")
    bundle.add_file(per_run)
    bundle.add_file(fan)
    name = f"montecarlo_stats_theta{_fmt(cfg.theta)}_seed{seed}.json"
    write_json(stats, bundle.path(name))
    bundle.add_file(name)
    table = f"table_costs_theta{_fmt(cfg.theta)}_seed{seed}.csv"
    with open(bundle.path(table), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["controller", "mean_cost", "std_cost"])
        for s in stats:
            w.writerow([s["controller"], f"{s['mean_cost']:.2f}", f"{s['std_cost']:.2f}"])
    bundle.add_file(table)
    bundle.notes["timings_are_informational"] = True
    bundle.notes["horizon_mode"] = horizon
    bundle.summaries = stats
    bundle.complete = True
    bundle.write()
    return EXIT_ERROR if fail_total > 0.01 * runs else EXIT_OK


def cmd_verify(args):
    from .verify import run_suite

    results = run_suite()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json([{"name": r.name, "passed": r.passed, "max_residual": r.max_residual,
                     "tol": r.tol, "trials": r.trials, "counterexample": r.counterexample}
                    for r in results], out / "verify_report.json")
    if failed:
        for r in failed:
            print(f"FAILED property {r.name}; counterexample: "
                  f"{json.dumps(r.counterexample, default=str)[:2000]}", file=sys.stderr)
        return EXIT_CERT
    print(f"all {len(results)} properties certified")
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--tol", type=float, help="solver tolerance override")

    p = argparse.ArgumentParser(prog="sltube", description="Robust MPC experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="one-shot solve at a state")
    s.add_argument("--config", help="experiment config (default: bundled benchmark)")
    s.add_argument("--controller", choices=[k.value for k in Kind])
    s.add_argument("--x0", help="initial state, comma separated")
    s.set_defaults(func=cmd_solve)
    r = sub.add_parser("roa", parents=[common], help="region-of-attraction grids and sweep")
    r.add_argument("--config")
    r.set_defaults(func=cmd_roa)
    m = sub.add_parser("montecarlo", parents=[common], help="closed-loop cost statistics")
    m.add_argument("--config")
    m.add_argument("--runs", type=int)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_montecarlo)
    v = sub.add_parser("verify", parents=[common], help="structural certification suite")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
