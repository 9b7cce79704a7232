"""Paired-run verification of the stability estimate for two problems.

Both problems are solved on one shared partition (the closure of the union of
their step plans) with identical Brownian batches, so pathwise differences
reflect coefficient perturbations only: common random numbers are mandatory,
not optional. The reported ratio is the empirical stability constant; it is
reported, never asserted against a specific value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InfeasibleError, UsageError
from .global_solver import (
    GlobalConfig,
    GlobalSolution,
    build_field_from_plan,
    plan_for,
    solve_global,
)
from .picard_solver import contraction_constants
from .problem import FBSDEProblem, coeff_batch
from .step_planner import IntervalRecord, StepPlan, max_local_interval


def _merge_bounds(a, b, tol=1e-10):
    merged = []
    for t in sorted(list(a) + list(b)):
        if not merged or t - merged[-1] > tol:
            merged.append(t)
    return merged


def _records_for_partition(p: FBSDEProblem, schedule, bounds, planner_cfg):
    """Per-interval records on the given boundaries, subdividing where the
    certified maximal length at the local terminal constant is exceeded."""
    lip = p.lipschitz
    records = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        k_term = schedule.k_at(b) if schedule is not None else lip.K1
        ch = max_local_interval(lip.K0, k_term, lip.grad_z_sigma, planner_cfg)
        pieces = max(int(math.ceil((b - a) / ch.delta - 1e-12)), 1)
        width = (b - a) / pieces
        for j in range(pieces):
            t_b = a + (j + 1) * width if j < pieces - 1 else b
            t_a = a + j * width
            k_here = schedule.k_at(t_b) if schedule is not None else lip.K1
            gamma = contraction_constants(lip.with_terminal(k_here), ch.eps, t_b - t_a).gamma
            records.append(
                IntervalRecord(t_a=t_a, t_b=t_b, eps=ch.eps, gamma=gamma, K_terminal_used=k_here)
            )
    return records


def common_partition(p: FBSDEProblem, q: FBSDEProblem, horizon: float, cfg: GlobalConfig):
    """Shared refinement of both problems' feasible plans (refining keeps
    every interval's gamma certified)."""
    plan_p, rep_p = plan_for(p, horizon, cfg)
    plan_q, rep_q = plan_for(q, horizon, cfg)
    for name, plan in (("first", plan_p), ("second", plan_q)):
        if not plan.feasible:
            raise InfeasibleError(
                f"{name} problem has no feasible plan on [0, {horizon}]: {plan.reason}",
                blocking_time=plan.blocking_time,
                reason=plan.reason,
            )
    bounds = _merge_bounds(plan_p.partition, plan_q.partition)
    recs_p = recs_q = None
    for _ in range(8):
        recs_p = _records_for_partition(p, rep_p.schedule, bounds, cfg.planner)
        recs_q = _records_for_partition(q, rep_q.schedule, bounds, cfg.planner)
        new_bounds = _merge_bounds(
            [recs_p[0].t_a] + [r.t_b for r in recs_p], [recs_q[0].t_a] + [r.t_b for r in recs_q]
        )
        if len(new_bounds) == len(bounds):
            break
        bounds = new_bounds
    mk = lambda recs, base: StepPlan(
        horizon=horizon,
        intervals=recs,
        feasible=True,
        eps_bar=base.eps_bar,
        K_max=base.K_max,
    )
    return (mk(recs_p, plan_p), rep_p), (mk(recs_q, plan_q), rep_q)


def _coeff_views(p: FBSDEProblem, block, k):
    if p.markovian:
        return block["X"][:, k : k + 1, :]
    raise UsageError(
        "stability evaluation along path-dependent coefficients needs markovian "
        "problems (registry problems qualify)"
    )


def delta_i0(p: FBSDEProblem, q: FBSDEProblem, baseline: GlobalSolution) -> float:
    """Monte Carlo size of the coefficient perturbation along the baseline
    trajectories: E[(int |df| + |db| dt)^2 + int |dsigma|^2 dt]."""
    if baseline.stored_blocks is None:
        raise UsageError("baseline solution must be solved with store_paths=True")
    if p.d != q.d or p.n != q.n:
        raise UsageError("problems must share dimensions")
    n_paths = baseline.stored_blocks[0]["X"].shape[0]
    acc_fb = np.zeros(n_paths)
    acc_sig = np.zeros(n_paths)
    for block in baseline.stored_blocks:
        grid, xv, yv, zv = block["grid"], block["X"], block["Y"], block["Z"]
        dt = grid.dt
        for k in range(grid.n_steps):
            t_k = grid.t0 + k * dt
            x_view = _coeff_views(p, block, k)
            y_k, z_k = yv[:, k], zv[:, k]
            db = coeff_batch(p.drift(t_k, x_view, y_k, z_k), n_paths, p.d) - coeff_batch(
                q.drift(t_k, x_view, y_k, z_k), n_paths, p.d
            )
            df = coeff_batch(p.driver(t_k, x_view, y_k, z_k), n_paths, p.n) - coeff_batch(
                q.driver(t_k, x_view, y_k, z_k), n_paths, p.n
            )
            dsig = coeff_batch(p.diffusion(t_k, x_view, y_k, z_k), n_paths, p.d, p.n) - coeff_batch(
                q.diffusion(t_k, x_view, y_k, z_k), n_paths, p.d, p.n
            )
            acc_fb += (np.linalg.norm(df, axis=1) + np.linalg.norm(db, axis=1)) * dt
            acc_sig += np.einsum("pij,pij->p", dsig, dsig) * dt
    return float(np.mean(acc_fb**2) + np.mean(acc_sig))


@dataclass
class StabilityReport:
    delta_i0_sq: float
    lhs: float
    rhs_driver: float
    ratio: float | None  # None is the 0/0 sentinel
    breakdown: dict
    seeds: dict

    def to_dict(self) -> dict:
        return {
            "delta_i0_sq": self.delta_i0_sq,
            "lhs": self.lhs,
            "rhs_driver": self.rhs_driver,
            "ratio": self.ratio,
            "breakdown": self.breakdown,
            "seeds": self.seeds,
        }


def _pathwise_lhs(sol_p: GlobalSolution, sol_q: GlobalSolution) -> dict:
    """sup_t E[|dX|^2_{2,t} + |dY_t|^2 + sum_{s>=t} |dZ_s|^2 ds] from stored blocks."""
    blocks_p, blocks_q = sol_p.stored_blocks, sol_q.stored_blocks
    if blocks_p is None or blocks_q is None:
        raise UsageError("both solutions must be solved with store_paths=True")
    if len(blocks_p) != len(blocks_q):
        raise UsageError("solutions were not produced on a common partition")
    n_paths = blocks_p[0]["X"].shape[0]
    normacc = np.zeros(n_paths)
    point_terms_xy = []
    z_step_means = []
    dz_dts = []
    sup_dx = 0.0
    sup_dy = 0.0
    last = len(blocks_p) - 1
    for bi, (bp, bq) in enumerate(zip(blocks_p, blocks_q)):
        grid = bp["grid"]
        dx = bp["X"] - bq["X"]
        dy = bp["Y"] - bq["Y"]
        dz = bp["Z"] - bq["Z"]
        sq = np.einsum("pkd,pkd->pk", dx, dx)
        dy_sq = np.einsum("pkn,pkn->pk", dy, dy)
        dz_sq = np.einsum("pkij,pkij->pk", dz, dz)
        s = grid.n_steps
        upto = s + 1 if bi == last else s
        for k in range(upto):
            x_term = normacc + sq[:, k]
            point_terms_xy.append(float(x_term.mean() + dy_sq[:, k].mean()))
            sup_dx = max(sup_dx, float(x_term.mean()))
            sup_dy = max(sup_dy, float(dy_sq[:, k].mean()))
            if k < s:
                z_step_means.append(float(dz_sq[:, k].mean()))
                dz_dts.append(grid.dt)
                normacc = normacc + sq[:, k] * grid.dt
    z_suffix = np.concatenate([np.cumsum((np.array(z_step_means) * np.array(dz_dts))[::-1])[::-1], [0.0]])
    # map emitted points to their starting step index (same construction order)
    terms = []
    step_idx = 0
    i = 0
    for bi, bp in enumerate(blocks_p):
        s = bp["grid"].n_steps
        upto = s + 1 if bi == len(blocks_p) - 1 else s
        for k in range(upto):
            z_term = z_suffix[step_idx] if k < s else 0.0
            terms.append(point_terms_xy[i] + z_term)
            if k < s:
                step_idx += 1
            i += 1
    return {
        "lhs": float(max(terms)),
        "sup_dx_sq": sup_dx,
        "sup_dy_sq": sup_dy,
        "z_total": float(z_suffix[0]),
    }


def stability_report(
    p: FBSDEProblem,
    q: FBSDEProblem,
    horizon: float,
    x0: np.ndarray | float | None = None,
    x0_q: np.ndarray | float | None = None,
    seed: int = 0,
    cfg: GlobalConfig | None = None,
) -> StabilityReport:
    """Solve both problems under common random numbers and report the
    empirical stability ratio lhs / (|dx|^2 + E|dg(X')|^2 + dI_0^2)."""
    if p.declared_class is not q.declared_class:
        raise InfeasibleError(
            f"problems are in different structural regimes "
            f"({p.declared_class.value} vs {q.declared_class.value}); "
            "the stability estimate requires the same condition",
            reason="regime mismatch",
        )
    cfg = cfg or GlobalConfig(n_paths=4096, train_paths=2048)
    cfg = replace(cfg, seed=seed, store_paths=True)
    if x0 is not None:
        p = replace(p, x0=np.atleast_1d(np.asarray(x0, dtype=np.float64)))
    if x0_q is not None:
        q = replace(q, x0=np.atleast_1d(np.asarray(x0_q, dtype=np.float64)))
    (plan_p, rep_p), (plan_q, rep_q) = common_partition(p, q, horizon, cfg)
    field_p = build_field_from_plan(p, plan_p, cfg, rep_p)
    field_q = build_field_from_plan(q, plan_q, cfg, rep_q)
    sol_p = solve_global(p, field_p, cfg, plan_p)
    sol_q = solve_global(q, field_q, cfg, plan_q)

    lhs_parts = _pathwise_lhs(sol_p, sol_q)
    di0 = delta_i0(p, q, sol_q)
    dx0 = p.x0 - q.x0
    dg = None
    if p.terminal_markovian and q.terminal_markovian:
        x_last = sol_q.stored_blocks[-1]["X"][:, -1:, :]
        dg_vals = np.asarray(p.terminal(x_last, sol_q.stored_blocks[-1]["grid"].dt)) - np.asarray(
            q.terminal(x_last, sol_q.stored_blocks[-1]["grid"].dt)
        )
        dg = float(np.mean(np.einsum("pn,pn->p", dg_vals, dg_vals)))
    elif len(sol_q.stored_blocks) == 1:
        blk = sol_q.stored_blocks[0]
        dg_vals = np.asarray(p.terminal(blk["X"], blk["grid"].dt)) - np.asarray(
            q.terminal(blk["X"], blk["grid"].dt)
        )
        dg = float(np.mean(np.einsum("pn,pn->p", dg_vals, dg_vals)))
    else:
        raise UsageError(
            "path-dependent terminal difference needs a single-interval plan"
        )
    rhs = float(dx0 @ dx0) + dg + di0
    lhs = lhs_parts["lhs"]
    ratio = None if (lhs == 0.0 and rhs == 0.0) else (math.inf if rhs == 0.0 else lhs / rhs)
    return StabilityReport(
        delta_i0_sq=di0,
        lhs=lhs,
        rhs_driver=rhs,
        ratio=ratio,
        breakdown={
            "dx0_sq": float(dx0 @ dx0),
            "dg_sq": dg,
            "delta_i0_sq": di0,
            **{k: v for k, v in lhs_parts.items() if k != "lhs"},
        },
        seeds={"seed": seed},
    )
