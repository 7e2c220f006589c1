"""Command-line entry point: ``delayhjb <subcommand> --problem FILE [options]``.

Subcommands write CSV artifacts into ``--out``; each file starts with a
``#`` comment row (tool version, seed, grid sizes) followed by a header row.
Errors print a JSON block to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys as _sys

import numpy as np

from . import __version__
from .control_sim import (OracleConfig, SimConfig, lag_chain_oracle, mc_cost, simulate_closed_loop)
from .errors import ConvergenceFailure, DelayHJBError, InvalidInput
from .gaussian_calculus import (blowup_times, check_hypotheses, compute_Q0, fit_slope, grad_Rt_reduced,
                                gradB_Rt)
from .hjb_solver import SolverGrids, eval_gradB_v, eval_v, solve
from .problem_file import parse_problem
from .system_model import embed_initial, first_component

SUBCOMMANDS = ("check", "solve", "eval", "simulate", "oracle", "probe")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows, meta):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _grids(numerics) -> SolverGrids:
    kw = {k: numerics[k] for k in ("y_points", "half_width", "gh_nodes", "y_range") if k in numerics}
    return SolverGrids(time_steps=int(numerics.get("time_steps", 32)), **kw)


def _initial(sys, numerics):
    y0 = np.array(numerics.get("y0", np.zeros(sys.n)), dtype=float)
    if y0.size != sys.n:
        raise InvalidInput(f"numerics.y0 needs {sys.n} entries")
    u0 = np.array(numerics.get("u0", np.zeros(sys.m)), dtype=float)
    if u0.size != sys.m:
        raise InvalidInput(f"numerics.u0 needs {sys.m} entries")
    return y0, np.tile(u0, (sys.npts - 1, 1))


def _solve(sys, prob, numerics, args):
    return solve(prob, sys, _grids(numerics), tol=args.tol or numerics.get("tol", 1e-7),
                 max_iter=int(numerics.get("max_iter", 200)), mode=args.mode or numerics.get("mode", "A"))


def cmd_check(sys, prob, numerics, args, meta):
    ts = blowup_times(prob.T)
    rep = check_hypotheses(sys, ts)
    rows = [(t, v, rep.blowup_exponent) for t, v in rep.rows()]
    write_csv(os.path.join(args.out, "check.csv"), ["t", "norm", "fitted_slope"], rows, meta)
    print(rep.summary())
    return 0


def cmd_solve(sys, prob, numerics, args, meta):
    try:
        rep, diag = _solve(sys, prob, numerics, args)
    except ConvergenceFailure as exc:
        if exc.diagnostics is not None:
            _write_diag(args.out, exc.diagnostics, meta)
        raise
    n, m = sys.n, sys.m
    meta = dict(meta, time_steps=rep.N, y_points=rep.grid.size)
    header = ["t"] + [f"y{i + 1}" for i in range(n)] + ["f"] + [f"fbar{j + 1}" for j in range(m)]
    write_csv(os.path.join(args.out, "value.csv"), header, rep.rows(), meta)
    _write_diag(args.out, diag, meta)
    print(f"converged: iterations={diag.iterations} subintervals={diag.subintervals} "
          f"final_distance={diag.records[-1][3]:.3e}")
    return 0


def _write_diag(out, diag, meta):
    rows = [(it, dist, ratio, blocks, b) for blocks, b, it, dist, ratio in diag.records]
    write_csv(os.path.join(out, "diagnostics.csv"), ["iteration", "distance", "ratio", "subintervals", "block"],
              rows, meta)


def cmd_eval(sys, prob, numerics, args, meta):
    rep, _ = _solve(sys, prob, numerics, args)
    y0, hist = _initial(sys, numerics)
    x = embed_initial(y0, hist, sys)
    t = float(args.t)
    v = eval_v(rep, t, x, sys)
    g = eval_gradB_v(rep, t, x, sys)
    header = ["t", "v"] + [f"gradB{j + 1}" for j in range(sys.m)]
    write_csv(os.path.join(args.out, "eval.csv"), header, [(t, v, *map(float, g))], meta)
    print(f"v = {v!r}")
    print("gradB v = " + " ".join(repr(float(c)) for c in g))
    return 0


def cmd_simulate(sys, prob, numerics, args, meta):
    rep, _ = _solve(sys, prob, numerics, args)
    y0, hist = _initial(sys, numerics)
    cfg = SimConfig(paths=int(numerics.get("paths", 2000)), seed=meta["seed"])
    res = simulate_closed_loop(sys, prob, rep, y0, hist, cfg)
    mean, se = mc_cost(res)
    write_csv(os.path.join(args.out, "costs.csv"), ["path", "running", "terminal", "total"],
              [(p, res.running[p], res.terminal[p], res.cost[p]) for p in range(cfg.paths)], meta)
    write_csv(os.path.join(args.out, "summary.csv"), ["mean_cost", "std_error", "paths"],
              [(mean, se, cfg.paths)], meta)
    rows = []
    for p in range(cfg.paths):
        for i, t in enumerate(res.times):
            u = res.u[p, min(i, res.u.shape[1] - 1)]
            rows.append((p, t, *map(float, res.y[p, i]), *map(float, u)))
    header = ["path", "t"] + [f"y{i + 1}" for i in range(sys.n)] + [f"u{j + 1}" for j in range(sys.m)]
    write_csv(os.path.join(args.out, "paths.csv"), header, rows, meta)
    print(f"mean cost = {mean!r} (standard error {se!r})")
    return 0


def cmd_oracle(sys, prob, numerics, args, meta):
    ocfg = OracleConfig(order=int(numerics.get("oracle_order", 4)),
                        y_points=int(numerics.get("oracle_y_points", 64)),
                        control_points=int(numerics.get("oracle_controls", 3)))
    y0, hist = _initial(sys, numerics)
    res = lag_chain_oracle(sys, prob, ocfg, y0, hist)
    meta = dict(meta, oracle_order=ocfg.order, oracle_y_points=ocfg.y_points,
                oracle_controls=ocfg.control_points, gh_nodes=ocfg.gh_nodes, refine_order=ocfg.refine_order)
    write_csv(os.path.join(args.out, "oracle.csv"), ["value", "error_bar", "refined_value"],
              [(res.value, res.error_bar, res.refined_value)], meta)
    rows = [(i * res.step, y, h, float(res.controls[res.policy[i, a, h], 0]))
            for i in range(res.policy.shape[0]) for a, y in enumerate(res.y_grid)
            for h in range(res.policy.shape[2])]
    write_csv(os.path.join(args.out, "oracle_policy.csv"), ["t", "y", "history", "u"], rows, meta)
    print(f"oracle value = {res.value!r} (refinement error {res.error_bar!r})")
    return 0


def cmd_probe(sys, prob, numerics, args, meta):
    ts = blowup_times(prob.T)
    y0, hist = _initial(sys, numerics)
    x = embed_initial(y0, hist, sys)
    invertible = compute_Q0(ts[0], sys).invertible
    rows, gb, gf = [], [], []
    for t in ts:
        y = first_component(t, x, sys)
        b = float(np.linalg.norm(gradB_Rt(prob.phi, t, y, sys)))
        f = float(np.linalg.norm(grad_Rt_reduced(prob.phi, t, y, sys))) if invertible else float("nan")
        gb.append(b), gf.append(f)
        rows.append((t, b, f))
    write_csv(os.path.join(args.out, "probe.csv"), ["t", "gradB_norm", "grad_norm"], rows, meta)
    print(f"gradB slope = {fit_slope(ts, gb):.6f}")
    if invertible:
        print(f"grad slope = {fit_slope(ts, gf):.6f}")
    return 0


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "eval": cmd_eval, "simulate": cmd_simulate,
            "oracle": cmd_oracle, "probe": cmd_probe}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delayhjb", description="Optimal control with delay in the control.")
    ap.add_argument("--version", action="version", version=f"delayhjb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--problem", required=True)
        p.add_argument("--out", default=".")
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=("A", "B"), default=None)
        if name == "eval":
            p.add_argument("--t", type=float, default=0.0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sys, prob, numerics, spec = parse_problem(args.problem)
        os.makedirs(args.out, exist_ok=True)
        seed = args.seed if args.seed is not None else int(numerics.get("seed", 0))
        meta = {"tool": f"delayhjb-{__version__}", "seed": seed, "grid": sys.npts - 1}
        return COMMANDS[args.command](sys, prob, numerics, args, meta)
    except DelayHJBError as exc:
        block = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "line", None) is not None:
            block["line"] = exc.line
        print(json.dumps(block), file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
