"""Decoupling-field construction and global solving by interval patching.

Backward pass: on each plan interval (right to left) a Picard local solve is
trained on sampled initial states, and the per-step regression tables of Y
become the field representation u(t, .) on that interval. Forward pass: the
intervals are re-solved left to right with terminal condition u(t_b, .) and
the realized per-path states carried across junctions; per-path Y jumps at
interior junctions are the continuity diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .bsde_engine import RegressionConfig, make_basis, running_integral
from .dominating_ode import ODESolution, TMaxReport, t_max_for_lipschitz
from .errors import InfeasibleError, UsageError
from . import _kernels
from .path_space import PathEnsemble, TimeGrid
from .picard_solver import (
    LocalSolution,
    PicardConfig,
    Workspace,
    local_solve,
    terminal_from_problem,
)
from .problem import FBSDEProblem, ProblemClass, check_monotonicity_condition, coeff_batch
from .sde_engine import generate_brownian
from .step_planner import PlannerConfig, StepPlan, plan_steps


@dataclass
class GlobalConfig:
    n_paths: int = 20_000
    steps_per_interval: int = 50
    seed: int = 0
    train_paths: int = 4096
    train_spread: float | None = None  # None: 0.5 * (1 + |center|) per component
    tol_fixed_point: float = 1e-6
    max_iters: int = 50
    regression: RegressionConfig = dc_field(default_factory=RegressionConfig)
    planner: PlannerConfig = dc_field(default_factory=PlannerConfig)
    store_paths: bool = False
    dt_ode: float | None = None


def _spawn_seeds(seed: int, label: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(label,))
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in ss.spawn(count)]




@dataclass
class FieldInterval:
    t_a: float
    t_b: float
    grid: TimeGrid
    y_coef: np.ndarray  # (S, F, n): regression tables at steps 0..S-1
    build_seed: int


@dataclass
class DecouplingField:
    problem: FBSDEProblem
    plan: StepPlan
    basis: object
    intervals: list  # FieldInterval, ascending
    k_schedule: ODESolution | None
    tmax_report: TMaxReport | None
    diagnostics: list  # per interval: dict(iterations, residuals, gamma...)
    config: GlobalConfig

    def interval_index_for(self, t: float) -> int:
        """Covering interval for t in [0, T); junctions belong to the right interval."""
        for i, iv in enumerate(self.intervals):
            if t < iv.t_b - 1e-12 or (i == len(self.intervals) - 1 and t <= iv.t_b + 1e-12):
                if t >= iv.t_a - 1e-12:
                    return i
        raise UsageError(f"t={t} outside the field's horizon")


def _terminal_field_closure(field: DecouplingField, interval_idx: int):
    """Terminal functional for interval i-1: evaluate u(t_a of interval i, .)."""
    iv = field.intervals[interval_idx]
    basis = field.basis
    coef = iv.y_coef[0]  # (F, n)
    needs_integral = basis.kind == "path_features"

    def terminal_fn(values: np.ndarray, dt: float, integral0=None):
        x_state = values[:, -1, :]
        if needs_integral:
            integ = np.sum(values[:, :-1, :], axis=1) * dt
            if integral0 is not None:
                integ = integ + np.asarray(integral0)
        else:
            integ = x_state
        feats = basis.build(x_state, integ)
        return feats @ coef

    return terminal_fn


def eval_field(field: DecouplingField, t: float, prefix) -> np.ndarray:
    """Evaluate the stored field representation at time t on a path prefix.

    The prefix must reach t; at t = T this is the exact terminal passthrough
    g(prefix). Deterministic: a pure lookup of the stored regressions.
    """
    from .path_space import DiscretePath

    if not isinstance(prefix, DiscretePath):
        raise UsageError("eval_field expects a DiscretePath prefix")
    horizon = field.plan.horizon
    if t > horizon + 1e-12 or t < -1e-12:
        raise UsageError(f"t={t} outside [0, {horizon}]")
    if abs(prefix.grid.T - t) > 1e-9:
        raise UsageError("prefix must end exactly at the query time")
    values = prefix.values[None, :, :]
    if abs(t - horizon) <= 1e-12:
        return terminal_from_problem(field.problem)(values, prefix.grid.dt, None)[0]
    idx = field.interval_index_for(t)
    iv = field.intervals[idx]
    k = int(round((t - iv.t_a) / iv.grid.dt))
    k = min(max(k, 0), iv.grid.n_steps - 1)
    x_state = values[:, -1, :]
    integ = running_integral(values, prefix.grid.dt, None)[:, -1, :]
    feats = field.basis.build(x_state, integ)
    return (feats @ iv.y_coef[k])[0]


def _plan_problem(p: FBSDEProblem, horizon: float, cfg: GlobalConfig):
    """Monotonicity check (where applicable), dominating-ODE schedule, step plan."""
    monotonicity = None
    if p.declared_class is ProblemClass.DRIFT_Y_SIGMA_X:
        monotonicity = check_monotonicity_condition(p, n_samples=200, seed=cfg.seed + 7)
    report = t_max_for_lipschitz(
        p.lipschitz,
        p.d,
        p.n,
        horizon,
        klass=p.declared_class,
        monotonicity=monotonicity,
        dt_ode=cfg.dt_ode,
    )
    plan = plan_steps(p.lipschitz, horizon, report.schedule, cfg.planner)
    return plan, report


def plan_for(p: FBSDEProblem, horizon: float, cfg: GlobalConfig | None = None) -> tuple:
    cfg = cfg or GlobalConfig()
    return _plan_problem(p, horizon, cfg)


def _drift_through_starts(p: FBSDEProblem, plan: StepPlan, cfg: GlobalConfig):
    """Training-path initial states per interval: forward states at each t_a
    simulated from 0 under (y, z) = (0, 0), plus carried running integrals."""
    from .sde_engine import ZeroCandidate, simulate_forward

    m = len(plan.intervals)
    n_tr = cfg.train_paths
    starts = [None] * m
    integrals = [None] * m
    prefixes = [None] * m
    seeds = _spawn_seeds(cfg.seed, 2, m)
    x_curr = np.broadcast_to(p.x0, (n_tr, p.d)).copy()
    i_curr = np.zeros((n_tr, p.d))
    full_values = None
    if not p.markovian:
        if m > 40:
            raise UsageError(
                "path-dependent coefficients with a plan of more than 40 intervals "
                "are not supported (full training prefixes would not fit in memory)"
            )
        full_values = [x_curr[:, None, :].copy()]
    cand = ZeroCandidate(n_tr, p.n)
    for i, iv in enumerate(plan.intervals):
        starts[i] = x_curr.copy()
        integrals[i] = i_curr.copy()
        if full_values is not None:
            prefixes[i] = np.concatenate(full_values, axis=1)
        grid = TimeGrid(iv.t_a, iv.t_b, cfg.steps_per_interval)
        noise = generate_brownian(grid, n_tr, seeds[i], dim=p.n)
        ens = simulate_forward(p, cand, x_curr, noise)
        vals = ens.values
        i_curr = i_curr + np.sum(vals[:, :-1, :], axis=1) * grid.dt
        x_curr = vals[:, -1, :].copy()
        if full_values is not None:
            full_values.append(vals[:, 1:, :])
    return starts, integrals, prefixes


def build_decoupling_field(
    p: FBSDEProblem, horizon: float, cfg: GlobalConfig | None = None
) -> DecouplingField:
    """Backward sweep over the plan: each interval's local solve is trained on
    sampled initial states and its Y-regressions become u on that interval."""
    cfg = cfg or GlobalConfig()
    plan, tmax_report = _plan_problem(p, horizon, cfg)
    if not plan.feasible:
        raise InfeasibleError(
            f"no feasible step plan on [0, {horizon}]: {plan.reason}",
            blocking_time=plan.blocking_time,
            reason=plan.reason,
        )
    return build_field_from_plan(p, plan, cfg, tmax_report)


def build_field_from_plan(
    p: FBSDEProblem,
    plan: StepPlan,
    cfg: GlobalConfig,
    tmax_report: TMaxReport | None = None,
) -> DecouplingField:
    m = len(plan.intervals)
    basis = make_basis(cfg.regression, p)
    starts, integrals, prefixes = _drift_through_starts(p, plan, cfg)
    spread_seeds = _spawn_seeds(cfg.seed, 3, m)
    build_seeds = _spawn_seeds(cfg.seed, 0, m)
    workspace = Workspace()
    field = DecouplingField(
        problem=p,
        plan=plan,
        basis=basis,
        intervals=[None] * m,
        k_schedule=tmax_report.schedule if tmax_report else None,
        tmax_report=tmax_report,
        diagnostics=[None] * m,
        config=cfg,
    )
    for i in range(m - 1, -1, -1):
        iv = plan.intervals[i]
        grid = TimeGrid(iv.t_a, iv.t_b, cfg.steps_per_interval)
        noise = generate_brownian(grid, cfg.train_paths, build_seeds[i], dim=p.n)
        if m == 1:
            train_starts = starts[i]
        else:
            rng = np.random.default_rng(spread_seeds[i])
            center = np.mean(np.abs(starts[i]), axis=0)
            spread = (
                cfg.train_spread
                if cfg.train_spread is not None
                else 0.5 * (1.0 + center)
            )
            train_starts = starts[i] + spread * rng.standard_normal(starts[i].shape)
        # integral0 carries what the values array does not span; a full prefix
        # array covers [0, t] itself, so the carried integral must then be zero
        if p.markovian:
            x_prefix = train_starts
            integral0 = integrals[i]
        else:
            pre_vals = prefixes[i]
            if pre_vals.shape[1] == 1:
                x_prefix = train_starts
                integral0 = integrals[i]
            else:
                pre_grid = TimeGrid(0.0, iv.t_a, pre_vals.shape[1] - 1)
                x_prefix = PathEnsemble(pre_grid, pre_vals)
                integral0 = None
        if i == m - 1:
            terminal_fn = terminal_from_problem(p)
        else:
            terminal_fn = _terminal_field_closure(field, i + 1)
        local_cfg = PicardConfig(
            tol_fixed_point=cfg.tol_fixed_point,
            max_iters=cfg.max_iters,
            regression=cfg.regression,
            eps=iv.eps if iv.gamma < 1.0 else None,
            k_terminal=iv.K_terminal_used,
            enforce_contraction=True,
        )
        sol = local_solve(
            p, x_prefix, terminal_fn, grid, noise, local_cfg,
            integral0=integral0, workspace=workspace,
        )
        field.intervals[i] = FieldInterval(
            t_a=iv.t_a, t_b=iv.t_b, grid=grid, y_coef=sol.backward.y_coef, build_seed=build_seeds[i]
        )
        field.diagnostics[i] = {
            "iterations": sol.iterations,
            "residual_history": sol.residual_history,
            "gamma_planned": iv.gamma,
            "empirical_ratios": sol.diagnostics.get("empirical_ratios", []),
        }
    return field


@dataclass
class GlobalSolution:
    """Streamed statistics of the patched global solution.

    times/y_mean/... have one row per emitted grid point (junction times
    appear once, owned by the right interval; t = T is included). Per-step
    quantities (e_z_sq, dt_step) follow the global step sequence.
    """

    horizon: float
    times: np.ndarray
    y_mean: np.ndarray  # (T_pts, n)
    y_std: np.ndarray  # (T_pts, n)
    z_frob_mean: np.ndarray  # (T_pts,)
    e_norm_sq: np.ndarray  # (T_pts,) E ||X||^2_{2,t}
    e_y_sq: np.ndarray  # (T_pts,)
    junction_col: np.ndarray  # (T_pts,) mean per-path |Y jump| at junction rows, else 0
    e_z_sq_steps: np.ndarray  # (n_steps_total,) E |Z_k|_F^2
    dt_steps: np.ndarray  # (n_steps_total,)
    step_of_point: np.ndarray  # index of the step starting at each emitted point (or -1 at T)
    junction_times: list
    junction_gap_mean: list
    junction_gap_max: list
    y0_mean: np.ndarray
    y0_std: np.ndarray
    terminal_y: np.ndarray  # (P, n) per-path Y_T (copied terminal values)
    terminal_g: np.ndarray  # (P, n) per-path g(X)
    diagnostics: list
    seeds: dict
    stored_blocks: list | None = None  # per interval: dict(grid, X, Y, Z) when store_paths


def solve_global(
    p: FBSDEProblem,
    field: DecouplingField,
    cfg: GlobalConfig | None = None,
    plan: StepPlan | None = None,
) -> GlobalSolution:
    """Forward sweep: local Picard solves with terminal u(t_b, .) and carried states."""
    cfg = cfg or field.config
    plan = plan or field.plan
    m = len(plan.intervals)
    n_paths = cfg.n_paths
    solve_seeds = _spawn_seeds(cfg.seed, 1, m)
    x_curr = np.broadcast_to(p.x0, (n_paths, p.d)).copy()
    i_curr = np.zeros((n_paths, p.d))
    normacc_mean = 0.0  # E int_0^t |X|^2 ds accumulates as a scalar recursion
    prefix_values = None
    if not p.markovian or not p.terminal_markovian:
        prefix_values = [x_curr[:, None, :].copy()]

    times, y_mean, y_std, z_frob, e_norm, e_y, junc_col = [], [], [], [], [], [], []
    e_z_steps, dt_steps, step_of_point = [], [], []
    junction_times, junction_gap_mean, junction_gap_max = [], [], []
    diagnostics = []
    stored = [] if cfg.store_paths else None
    y_end_prev = None
    y0_mean = y0_std = None
    terminal_y = terminal_g = None
    step_counter = 0
    workspace = Workspace()

    for i in range(m):
        iv = plan.intervals[i]
        grid = TimeGrid(iv.t_a, iv.t_b, cfg.steps_per_interval)
        noise = generate_brownian(grid, n_paths, solve_seeds[i], dim=p.n)
        if i == m - 1:
            terminal_fn = terminal_from_problem(p)
        else:
            terminal_fn = _terminal_field_closure(field, i + 1)
        if prefix_values is not None and len(prefix_values) > 1:
            pre_vals = np.concatenate(prefix_values, axis=1)
            pre_grid = TimeGrid(0.0, iv.t_a, pre_vals.shape[1] - 1)
            x_prefix = PathEnsemble(pre_grid, pre_vals)
            integral0 = None  # the carried values array spans [0, t] itself
        else:
            x_prefix = x_curr
            integral0 = i_curr
        local_cfg = PicardConfig(
            tol_fixed_point=cfg.tol_fixed_point,
            max_iters=cfg.max_iters,
            regression=cfg.regression,
            eps=iv.eps if iv.gamma < 1.0 else None,
            k_terminal=iv.K_terminal_used,
            enforce_contraction=True,
        )
        sol = local_solve(
            p, x_prefix, terminal_fn, grid, noise, local_cfg,
            integral0=integral0, workspace=workspace,
        )
        diagnostics.append(
            {
                "interval": (iv.t_a, iv.t_b),
                "iterations": sol.iterations,
                "gamma_planned": iv.gamma,
                "residual_history": sol.residual_history,
            }
        )
        s = grid.n_steps
        fast = sol.x_tm is not None
        if fast:
            # time-major rows: one fused pass per array for the step statistics
            x_rows = sol.x_tm
            y_rows = sol.backward.y_tm
            z_rows = sol.backward.z_tm
            x_m2, y_m1, y_m2, z_abs, z_m2 = _kernels.interval_stats_tm(x_rows, y_rows, z_rows)
            yv_first = np.asarray(y_rows[0], dtype=np.float64)[:, None]
            yv_last = np.asarray(y_rows[-1], dtype=np.float64)[:, None].copy()
        else:
            vals = sol.ensemble.values[:, -(s + 1) :, :]
            yv, zv = sol.backward.Y, sol.backward.Z
            sq = np.einsum("pkd,pkd->pk", vals, vals)
            z_sq = np.einsum("pkij,pkij->pk", zv, zv)
            x_m2 = sq.mean(axis=0)
            z_abs = np.sqrt(z_sq).mean(axis=0)
            z_m2 = z_sq.mean(axis=0)
            yv_first = yv[:, 0]
            yv_last = yv[:, -1]
        if stored is not None:
            if fast:
                xs = np.ascontiguousarray(sol.x_tm.T)[:, :, None]
                stored.append(
                    {"grid": grid, "X": xs, "Y": sol.backward.Y, "Z": sol.backward.Z}
                )
            else:
                stored.append({"grid": grid, "X": vals, "Y": yv, "Z": zv})
        if i == 0:
            y0_mean = np.atleast_1d(np.asarray(yv_first.mean(axis=0)))
            y0_std = np.atleast_1d(np.asarray(yv_first.std(axis=0)))
        if i > 0:
            gaps = np.linalg.norm(np.atleast_2d(yv_first) - np.atleast_2d(y_end_prev), axis=1)
            junction_times.append(iv.t_a)
            junction_gap_mean.append(float(gaps.mean()))
            junction_gap_max.append(float(gaps.max()))
        # emit rows for steps 0..S-1 (right endpoint owned by the next interval)
        for k in range(s):
            times.append(iv.t_a + k * grid.dt)
            if fast:
                y_mean.append(np.array([y_m1[k]]))
                y_std.append(np.array([math.sqrt(max(y_m2[k] - y_m1[k] ** 2, 0.0))]))
                e_y.append(y_m2[k])
            else:
                y_mean.append(yv[:, k].mean(axis=0))
                y_std.append(yv[:, k].std(axis=0))
                e_y.append(float((np.linalg.norm(yv[:, k], axis=1) ** 2).mean()))
            z_frob.append(float(z_abs[k]))
            e_norm.append(float(normacc_mean + x_m2[k]))
            junc_col.append(junction_gap_mean[-1] if (i > 0 and k == 0) else 0.0)
            e_z_steps.append(float(z_m2[k]))
            dt_steps.append(grid.dt)
            step_of_point.append(step_counter)
            step_counter += 1
            normacc_mean = normacc_mean + x_m2[k] * grid.dt
        if i == m - 1:
            times.append(grid.T)
            if fast:
                y_mean.append(np.array([y_m1[s]]))
                y_std.append(np.array([math.sqrt(max(y_m2[s] - y_m1[s] ** 2, 0.0))]))
                e_y.append(y_m2[s])
                terminal_y = np.asarray(sol.backward.y_tm[s], dtype=np.float64)[:, None].copy()
            else:
                y_mean.append(yv[:, s].mean(axis=0))
                y_std.append(yv[:, s].std(axis=0))
                e_y.append(float((np.linalg.norm(yv[:, s], axis=1) ** 2).mean()))
                terminal_y = yv[:, s].copy()
            z_frob.append(float(z_abs[s - 1]))
            e_norm.append(float(normacc_mean + x_m2[s]))
            junc_col.append(0.0)
            step_of_point.append(-1)
            terminal_g = np.asarray(
                terminal_fn(sol.ensemble.values, grid.dt, integral0), dtype=np.float64
            )
        if fast:
            i_curr = i_curr + (
                np.sum(sol.x_tm[:-1], axis=0, dtype=np.float64) * grid.dt
            )[:, None]
            x_curr = np.asarray(sol.x_tm[-1], dtype=np.float64)[:, None].copy()
            y_end_prev = yv_last
            if prefix_values is not None:
                prefix_values.append(np.ascontiguousarray(sol.x_tm[1:].T)[:, :, None])
        else:
            i_curr = i_curr + np.sum(vals[:, :-1, :], axis=1) * grid.dt
            x_curr = vals[:, -1, :].copy()
            y_end_prev = yv_last
            if prefix_values is not None:
                prefix_values.append(vals[:, 1:, :])

    return GlobalSolution(
        horizon=plan.horizon,
        times=np.asarray(times),
        y_mean=np.asarray(y_mean),
        y_std=np.asarray(y_std),
        z_frob_mean=np.asarray(z_frob),
        e_norm_sq=np.asarray(e_norm),
        e_y_sq=np.asarray(e_y),
        junction_col=np.asarray(junc_col),
        e_z_sq_steps=np.asarray(e_z_steps),
        dt_steps=np.asarray(dt_steps),
        step_of_point=np.asarray(step_of_point, dtype=np.int64),
        junction_times=junction_times,
        junction_gap_mean=junction_gap_mean,
        junction_gap_max=junction_gap_max,
        y0_mean=np.asarray(y0_mean),
        y0_std=np.asarray(y0_std),
        terminal_y=terminal_y,
        terminal_g=terminal_g,
        diagnostics=diagnostics,
        seeds={"seed": cfg.seed, "solve_seeds": solve_seeds},
        stored_blocks=stored,
    )


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    ratio: float | None  # None is the 0/0 sentinel
    breakdown: dict


def _zero_data_terms(p: FBSDEProblem, horizon: float, n_steps: int = 256):
    """|g(0)|^2 and I_0^2 on the zero path (coefficients are deterministic)."""
    grid = TimeGrid(0.0, horizon, n_steps)
    zeros_path = np.zeros((1, n_steps + 1, p.d))
    y0 = np.zeros((1, p.n))
    z0 = np.zeros((1, p.n, p.n))
    acc_fb = 0.0
    acc_sig = 0.0
    for k in range(n_steps):
        t_k = k * grid.dt
        xv = zeros_path[:, k : k + 1, :] if p.markovian else zeros_path[:, : k + 1, :]
        b0 = coeff_batch(p.drift(t_k, xv, y0, z0), 1, p.d)[0]
        f0 = coeff_batch(p.driver(t_k, xv, y0, z0), 1, p.n)[0]
        s0 = coeff_batch(p.diffusion(t_k, xv, y0, z0), 1, p.d, p.n)[0]
        acc_fb += (np.linalg.norm(f0) + np.linalg.norm(b0)) * grid.dt
        acc_sig += float(np.sum(s0 * s0)) * grid.dt
    g0 = np.asarray(p.terminal(zeros_path, grid.dt))[0]
    i0_sq = acc_fb**2 + acc_sig
    return float(g0 @ g0), i0_sq


def apriori_bound_check(sol: GlobalSolution, p: FBSDEProblem) -> AprioriReport:
    """Solution-size over data-size ratio: the empirical constant of the
    small-interval a-priori estimate, computed from streamed statistics."""
    z_suffix = np.concatenate(
        [np.cumsum((sol.e_z_sq_steps * sol.dt_steps)[::-1])[::-1], [0.0]]
    )
    lhs_terms = sol.e_norm_sq + sol.e_y_sq + np.where(
        sol.step_of_point >= 0, z_suffix[np.clip(sol.step_of_point, 0, None)], 0.0
    )
    lhs = float(np.max(lhs_terms))
    g0_sq, i0_sq = _zero_data_terms(p, sol.horizon)
    x0 = p.x0
    rhs = float(x0 @ x0) + g0_sq + i0_sq
    ratio = None if (lhs == 0.0 and rhs == 0.0) else (math.inf if rhs == 0.0 else lhs / rhs)
    return AprioriReport(
        lhs=lhs,
        rhs=rhs,
        ratio=ratio,
        breakdown={"x0_sq": float(x0 @ x0), "g0_sq": g0_sq, "i0_sq": i0_sq},
    )
