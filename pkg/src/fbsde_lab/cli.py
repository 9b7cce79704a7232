"""Command-line surface: plan / solve / domode / stability.

Exit codes: 0 success, 1 usage or unknown input, 2 mathematical infeasibility,
3 numerical failure. Every run writes a manifest.json (sorted keys) with the
command, parameters, seeds, plan summary, output paths, wall clock and
version; CSV floats use 17-significant-digit formatting so reruns with the
same seed are byte-identical (wall clock lives only in the manifest).
"""

from __future__ import annotations

import argparse
import inspect
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dominating_ode import DominatingODE, integrate_backward, t_max_for_lipschitz
from .errors import FbsdeError, InfeasibleError, UsageError
from .global_solver import GlobalConfig, apriori_bound_check, build_decoupling_field, plan_for, solve_global
from .problem import REGISTRY, ProblemClass, check_monotonicity_condition, make_problem
from .bsde_engine import RegressionConfig
from .stability import stability_report
from .step_planner import PlannerConfig


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _manifest(out_dir: Path, command: str, args: dict, extra: dict, outputs: list, t0: float):
    payload = {
        "command": command,
        "arguments": args,
        "outputs": sorted(str(o) for o in outputs),
        "version": __version__,
        "wall_clock_seconds": time.time() - t0,
        **extra,
    }
    path = out_dir / "manifest.json"
    _write_json(path, payload)
    return path


def _resolve_threads(flag_value):
    env = os.environ.get("FBSDE_LAB_THREADS")
    n = None
    if flag_value is not None:
        n = int(flag_value)
    if env:
        n = int(env)  # env overrides the flag
    if n is None:
        return
    try:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:
        pass


def _problem_from_args(args) -> object:
    params = {}
    factory = REGISTRY.get(args.problem)
    if factory is None:
        raise UsageError(f"unknown problem {args.problem!r}; registry: {sorted(REGISTRY)}")
    accepted = set(inspect.signature(factory).parameters)
    for flag, name in (("x0", "x0"), ("k", "k"), ("f_shift", "f_shift"), ("T_hint", "T_hint")):
        val = getattr(args, flag, None)
        if val is not None:
            if name not in accepted:
                raise UsageError(f"problem {args.problem!r} does not take --{flag.replace('_', '-')}")
            params[name] = val
    if "T_hint" in accepted and "T_hint" not in params and hasattr(args, "T"):
        params["T_hint"] = args.T
    return make_problem(args.problem, **params)


def _global_config(args, for_solve: bool) -> GlobalConfig:
    planner = PlannerConfig(max_interval_length=getattr(args, "max_interval", None))
    reg = RegressionConfig(
        basis=getattr(args, "basis", "auto"), degree=getattr(args, "degree", 2)
    )
    return GlobalConfig(
        n_paths=getattr(args, "paths", 20000),
        steps_per_interval=getattr(args, "steps", 50),
        seed=getattr(args, "seed", 0),
        train_paths=getattr(args, "train_paths", 4096),
        planner=planner,
        regression=reg,
        store_paths=False,
    )


def cmd_plan(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = _problem_from_args(args)
    cfg = _global_config(args, for_solve=False)
    plan, report = plan_for(p, args.T, cfg)
    plan_path = out / "plan.json"
    plan_path.write_text(plan.to_json() + "\n")
    extra = {
        "problem": p.name,
        "problem_params": p.params,
        "horizon": args.T,
        "plan_summary": {
            "feasible": plan.feasible,
            "n_intervals": len(plan.intervals),
            "eps_bar": plan.eps_bar,
            "K_max": plan.K_max,
            "blocking_time": plan.blocking_time,
            "reason": plan.reason,
        },
        "seeds": {"seed": cfg.seed},
        "t_max": report.schedule.t_max,
    }
    manifest = _manifest(out, "plan", _args_dict(args), extra, [plan_path], t0)
    if plan.feasible:
        print(f"feasible plan with {len(plan.intervals)} intervals -> {plan_path}")
        return 0
    print(f"infeasible: {plan.reason}", file=sys.stderr)
    if plan.blocking_time is not None:
        print(f"blocking time: {_fmt(plan.blocking_time)}", file=sys.stderr)
    print(f"details -> {plan_path}, {manifest}", file=sys.stderr)
    return 2


def cmd_solve(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = _problem_from_args(args)
    cfg = _global_config(args, for_solve=True)
    field = build_decoupling_field(p, args.T, cfg)
    plan = field.plan
    sol = solve_global(p, field, cfg)
    plan_path = out / "plan.json"
    plan_path.write_text(plan.to_json() + "\n")
    csv_path = out / "solution.csv"
    n = p.n
    header = (
        ["t"]
        + [f"Y_mean_{i}" for i in range(n)]
        + [f"Y_std_{i}" for i in range(n)]
        + ["Z_frob_mean", "junction_gap"]
    )
    lines = [",".join(header)]
    for row in range(sol.times.shape[0]):
        cells = [_fmt(sol.times[row])]
        cells += [_fmt(v) for v in sol.y_mean[row]]
        cells += [_fmt(v) for v in sol.y_std[row]]
        cells.append(_fmt(sol.z_frob_mean[row]))
        cells.append(_fmt(sol.junction_col[row]))
        lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n")
    apriori = apriori_bound_check(sol, p)
    extra = {
        "problem": p.name,
        "problem_params": p.params,
        "horizon": args.T,
        "grid": {"n_paths": cfg.n_paths, "steps_per_interval": cfg.steps_per_interval},
        "seeds": sol.seeds,
        "plan_summary": {
            "feasible": True,
            "n_intervals": len(plan.intervals),
            "eps_bar": plan.eps_bar,
            "K_max": plan.K_max,
        },
        "results": {
            "Y0_mean": [float(v) for v in sol.y0_mean],
            "Y0_std": [float(v) for v in sol.y0_std],
            "mean_z_frob": float(np.mean(sol.z_frob_mean)),
            "max_junction_gap": max(sol.junction_gap_max, default=0.0),
            "apriori_ratio": apriori.ratio,
        },
    }
    _manifest(out, "solve", _args_dict(args), extra, [plan_path, csv_path], t0)
    print(
        f"Y0 = {_fmt(sol.y0_mean[0])} (std {_fmt(sol.y0_std[0])}), "
        f"mean |Z| = {_fmt(np.mean(sol.z_frob_mean))}, "
        f"{len(plan.intervals)} intervals -> {csv_path}"
    )
    return 0


def _parse_kv(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def cmd_domode(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.riccati:
        kv = _parse_kv(args.riccati)
        a = kv.get("a", 1.0)
        c = kv.get("c", 1.0)
        ode = DominatingODE(
            kind="riccati", c0=kv.get("f", 0.0), c1=kv.get("b", 0.0), c2=a,
            y_terminal=c, horizon=args.T,
        )
        schedule = integrate_backward(ode, dt_ode=args.dt_ode)
        source = {"riccati": kv}
    elif args.problem:
        p = _problem_from_args(args)
        monotonicity = None
        if p.declared_class is ProblemClass.DRIFT_Y_SIGMA_X:
            monotonicity = check_monotonicity_condition(p, n_samples=200, seed=args.seed + 7)
        report = t_max_for_lipschitz(
            p.lipschitz, p.d, p.n, args.T, klass=p.declared_class,
            monotonicity=monotonicity, dt_ode=args.dt_ode,
        )
        schedule, ode = report.schedule, report.ode
        source = {"problem": p.name, "ode_kind": ode.kind}
    else:
        if args.K0 is None or args.K1 is None:
            raise UsageError("domode needs a problem, --riccati pairs, or --K0/--K1 data")
        from .problem import LipschitzData

        lip = LipschitzData(K0=args.K0, K1=args.K1, grad_z_sigma=args.grad_z_sigma or 0.0)
        klass = ProblemClass(args.problem_class)
        report = t_max_for_lipschitz(lip, args.d, args.n, args.T, klass=klass, dt_ode=args.dt_ode)
        schedule, ode = report.schedule, report.ode
        source = {"lipschitz": {"K0": args.K0, "K1": args.K1, "grad_z_sigma": args.grad_z_sigma or 0.0}}
    csv_path = out / "domode.csv"
    k_sched = schedule.k_schedule()
    lines = ["t,y,K"]
    for t, y, k in zip(schedule.times, schedule.y, k_sched):
        lines.append(f"{_fmt(t)},{_fmt(y)},{_fmt(k)}")
    csv_path.write_text("\n".join(lines) + "\n")
    t_max_str = _fmt(schedule.t_max) if schedule.exploded else "none"
    print(f"t_max: {t_max_str}")
    extra = {
        "t_max": schedule.t_max if schedule.exploded else None,
        "exploded": schedule.exploded,
        "ode": {"kind": ode.kind, "c0": ode.c0, "c1": ode.c1, "c2": ode.c2, "c3": ode.c3,
                "y_terminal": ode.y_terminal},
        "horizon": args.T,
        **source,
    }
    _manifest(out, "domode", _args_dict(args), extra, [csv_path], t0)
    return 0


def cmd_stability(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = _problem_from_args(args)
    if args.problem2:
        args2 = argparse.Namespace(**{**vars(args), "problem": args.problem2})
        q = _problem_from_args(args2)
    else:
        q = p
    from .problem import with_driver_shift

    if args.f_shift_perturb:
        q = with_driver_shift(q, args.f_shift_perturb)
    x0_q = None
    if args.x0_shift:
        x0_q = p.x0 + args.x0_shift
    cfg = GlobalConfig(
        n_paths=args.paths,
        steps_per_interval=args.steps,
        train_paths=min(args.paths, 4096),
        store_paths=True,
        seed=args.seed,
    )
    report = stability_report(p, q, args.T, x0=None, x0_q=x0_q, seed=args.seed, cfg=cfg)
    json_path = out / "stability.json"
    _write_json(json_path, report.to_dict())
    _manifest(
        out,
        "stability",
        _args_dict(args),
        {"problem": p.name, "problem2": q.name, "horizon": args.T},
        [json_path],
        t0,
    )
    ratio = "0/0" if report.ratio is None else _fmt(report.ratio)
    print(f"lhs = {_fmt(report.lhs)}, rhs = {_fmt(report.rhs_driver)}, ratio = {ratio}")
    return 0


def _args_dict(args) -> dict:
    skip = {"func"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsde-lab",
        description="Numerical laboratory for path-dependent coupled forward-backward SDEs",
    )
    parser.add_argument("--threads", type=int, default=None, help="numba thread count "
                        "(FBSDE_LAB_THREADS overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_problem_flags(sp, with_solve_flags=True):
        sp.add_argument("problem", help=f"registry problem: {', '.join(sorted(REGISTRY))}")
        sp.add_argument("--T", type=float, required=True, help="horizon")
        sp.add_argument("--x0", type=float, default=None)
        sp.add_argument("--k", type=float, default=None, help="delarue diffusion offset")
        sp.add_argument("--f-shift", dest="f_shift", type=float, default=None,
                        help="constant driver shift (decoupled_brownian)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")
        sp.add_argument("--max-interval", dest="max_interval", type=float, default=None,
                        help="force plan refinement to at most this interval length")
        if with_solve_flags:
            sp.add_argument("--paths", type=int, default=20000)
            sp.add_argument("--steps", type=int, default=50, help="steps per plan interval")
            sp.add_argument("--train-paths", dest="train_paths", type=int, default=4096)
            sp.add_argument("--basis", default="auto",
                            choices=["auto", "markov_poly", "path_features"])
            sp.add_argument("--degree", type=int, default=2)

    sp = sub.add_parser("plan", help="compute and write the step plan")
    add_problem_flags(sp, with_solve_flags=False)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("solve", help="build the decoupling field and solve globally")
    add_problem_flags(sp, with_solve_flags=True)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("domode", help="dominating-ODE analysis: (t, y_t, K_t) table and t_max")
    sp.add_argument("problem", nargs="?", default=None)
    sp.add_argument("--T", type=float, required=True)
    sp.add_argument("--riccati", nargs="+", default=None, metavar="k=v",
                    help="direct ODE: dy/dt = -(a y^2 + b y + f), y_T = c")
    sp.add_argument("--K0", type=float, default=None)
    sp.add_argument("--K1", type=float, default=None)
    sp.add_argument("--grad-z-sigma", dest="grad_z_sigma", type=float, default=None)
    sp.add_argument("--d", type=int, default=1)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--class", dest="problem_class", default="general",
                    choices=[c.value for c in ProblemClass])
    sp.add_argument("--dt-ode", dest="dt_ode", type=float, default=None)
    sp.add_argument("--x0", type=float, default=None)
    sp.add_argument("--k", type=float, default=None)
    sp.add_argument("--f-shift", dest="f_shift", type=float, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_domode)

    sp = sub.add_parser("stability", help="paired-run stability report")
    add_problem_flags(sp, with_solve_flags=True)
    sp.add_argument("--problem2", default=None, help="second problem (default: same)")
    sp.add_argument("--f-shift-perturb", dest="f_shift_perturb", type=float, default=0.0,
                    help="driver shift applied to the second problem")
    sp.add_argument("--x0-shift", dest="x0_shift", type=float, default=0.0)
    sp.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    _resolve_threads(args.threads)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if exc.blocking_time is not None:
            print(f"blocking time: {_fmt(exc.blocking_time)}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FbsdeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 3)


if __name__ == "__main__":
    sys.exit(main())
