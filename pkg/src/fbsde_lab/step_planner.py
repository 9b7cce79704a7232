"""Partition [0, T] into subintervals certified by the contraction constants.

Planning runs backward from T: the terminal Lipschitz constant of each
interval comes from the dominating-ODE schedule K_t at its right endpoint,
and the interval length is the largest delta with gamma(eps, delta) below the
target for the best eps. gamma_target is 0.9 rather than 1: the discrete
solver adds Monte Carlo and discretization slack on top of the idealized
contraction factor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dominating_ode import ODESolution
from .errors import InfeasibleError, UsageError
from .picard_solver import contraction_constants, gamma_small_time_limit
from .problem import LipschitzData


@dataclass(frozen=True)
class PlannerConfig:
    gamma_target: float = 0.9
    eps_min: float = 1e-4
    eps_max: float = 10.0
    eps_points: int = 60
    eps_refine_iters: int = 12
    delta_max: float = 10.0
    bisect_iters: int = 32
    max_intervals: int = 200_000
    max_interval_length: float | None = None


@dataclass(frozen=True)
class IntervalRecord:
    t_a: float
    t_b: float
    eps: float
    gamma: float
    K_terminal_used: float

    @property
    def length(self) -> float:
        return self.t_b - self.t_a


@dataclass
class StepPlan:
    horizon: float
    intervals: list  # IntervalRecord, ascending in time
    feasible: bool
    eps_bar: float | None = None
    K_max: float | None = None
    blocking_time: float | None = None
    reason: str | None = None

    @property
    def partition(self) -> list:
        if not self.intervals:
            return []
        return [self.intervals[0].t_a] + [iv.t_b for iv in self.intervals]

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "feasible": self.feasible,
            "eps_bar": self.eps_bar,
            "K_max": self.K_max,
            "blocking_time": self.blocking_time,
            "reason": self.reason,
            "n_intervals": len(self.intervals),
            "intervals": [
                {
                    "t_a": iv.t_a,
                    "t_b": iv.t_b,
                    "eps": iv.eps,
                    "gamma": iv.gamma,
                    "K_terminal_used": iv.K_terminal_used,
                }
                for iv in self.intervals
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, **kwargs)


@dataclass(frozen=True)
class IntervalChoice:
    delta: float
    eps: float
    gamma: float


def _max_delta_for_eps(lip: LipschitzData, eps: float, cfg: PlannerConfig) -> tuple[float, float]:
    """Largest delta with gamma(eps, delta) <= target (gamma is increasing in delta)."""
    target = cfg.gamma_target
    hi = cfg.delta_max
    g_hi = contraction_constants(lip, eps, hi).gamma
    if g_hi <= target:
        return hi, g_hi
    lo = 0.0
    g_lo = gamma_small_time_limit(lip, eps)
    if g_lo > target:
        return 0.0, g_lo
    for _ in range(cfg.bisect_iters):
        mid = 0.5 * (lo + hi)
        if mid <= 0.0:
            break
        g_mid = contraction_constants(lip, eps, mid).gamma
        if g_mid <= target:
            lo, g_lo = mid, g_mid
        else:
            hi = mid
    return lo, g_lo


def max_local_interval(
    k0: float, k_term: float, grad_z_sigma: float, cfg: PlannerConfig | None = None
) -> IntervalChoice:
    """Grid-then-refine search over eps maximizing the certified interval length."""
    cfg = cfg or PlannerConfig()
    if k_term * grad_z_sigma >= 1.0:
        raise InfeasibleError(
            f"K1*|grad_z sigma| = {k_term * grad_z_sigma:g} >= 1: no contraction interval exists",
            reason=f"K1*|grad_z sigma| = {k_term * grad_z_sigma:g} >= 1",
        )
    lip = LipschitzData(K0=k0, K1=k_term, grad_z_sigma=grad_z_sigma)
    if k0 == 0.0:
        # grad_z_sigma <= K0 forces 0 too: gamma vanishes identically
        return IntervalChoice(delta=cfg.delta_max, eps=cfg.eps_min, gamma=0.0)
    eps_grid = np.geomspace(cfg.eps_min, cfg.eps_max, cfg.eps_points)
    best = IntervalChoice(delta=0.0, eps=float(eps_grid[0]), gamma=math.inf)
    best_idx = -1
    for idx, eps in enumerate(eps_grid):
        delta, gamma = _max_delta_for_eps(lip, float(eps), cfg)
        if delta > best.delta:
            best = IntervalChoice(delta=delta, eps=float(eps), gamma=gamma)
            best_idx = idx
    if best.delta <= 0.0:
        raise InfeasibleError(
            "no (eps, delta) with gamma below target: "
            f"min_eps gamma(eps, 0+) >= {cfg.gamma_target}",
            reason="gamma floor above target",
        )
    # ternary refinement of eps between the grid neighbors of the best point
    lo = float(eps_grid[max(best_idx - 1, 0)])
    hi = float(eps_grid[min(best_idx + 1, len(eps_grid) - 1)])
    for _ in range(cfg.eps_refine_iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        d1, g1 = _max_delta_for_eps(lip, m1, cfg)
        d2, g2 = _max_delta_for_eps(lip, m2, cfg)
        if d1 >= d2:
            hi = m2
            if d1 > best.delta:
                best = IntervalChoice(delta=d1, eps=m1, gamma=g1)
        else:
            lo = m1
            if d2 > best.delta:
                best = IntervalChoice(delta=d2, eps=m2, gamma=g2)
    return best


class _Schedule:
    """Normalized view over an ODESolution or a plain callable t -> K_t."""

    def __init__(self, k_schedule, horizon: float):
        self.horizon = horizon
        if isinstance(k_schedule, ODESolution):
            self._sol = k_schedule
            self.k = k_schedule.k_at
            self.exploded = k_schedule.exploded
            self.t_max = k_schedule.t_max
        else:
            self._sol = None
            self.k = k_schedule
            self.exploded = False
            self.t_max = None
            probe = [k_schedule(t) for t in np.linspace(0.0, horizon, 257)]
            bad = [t for t, v in zip(np.linspace(0.0, horizon, 257), probe) if not np.isfinite(v)]
            if bad:
                self.exploded = True
                self.t_max = float(max(bad))

    def k_max(self) -> float:
        if self._sol is not None:
            return self._sol.k_max(self.horizon)
        return float(max(self.k(t) for t in np.linspace(0.0, self.horizon, 1025)))

    def is_constant(self) -> bool:
        vals = [self.k(t) for t in np.linspace(0.0, self.horizon, 65)]
        return max(vals) - min(vals) <= 1e-12 * max(1.0, abs(vals[0]))


def plan_steps(
    lip: LipschitzData,
    horizon: float,
    k_schedule,
    cfg: PlannerConfig | None = None,
) -> StepPlan:
    """Build the partition backward from T with per-endpoint terminal constants.

    Infeasibility (schedule explosion inside [0, T], or the small-time product
    reaching 1) is reported with the blocking time rather than raised: the
    plan carries the diagnostic.
    """
    cfg = cfg or PlannerConfig()
    if horizon <= 0:
        raise UsageError("horizon must be positive")
    sched = _Schedule(k_schedule, horizon)
    if sched.exploded and sched.t_max is not None and sched.t_max >= 0.0:
        return StepPlan(
            horizon=horizon,
            intervals=[],
            feasible=False,
            blocking_time=float(sched.t_max),
            reason=(
                "Lipschitz-bound schedule explodes at "
                f"t = {sched.t_max:.6g}: no regular decoupling field below it"
            ),
        )
    k_max = sched.k_max()
    gz = lip.grad_z_sigma
    if k_max * gz >= 1.0:
        ts = np.linspace(0.0, horizon, 4097)
        bad = [t for t in ts if sched.k(t) * gz >= 1.0]
        blocking = float(max(bad)) if bad else None
        return StepPlan(
            horizon=horizon,
            intervals=[],
            feasible=False,
            blocking_time=blocking,
            reason=f"K_t*|grad_z sigma| reaches {k_max * gz:.4g} >= 1 on [0, T]",
        )
    try:
        eps_bar_choice = max_local_interval(lip.K0, k_max, gz, cfg)
    except InfeasibleError as exc:
        return StepPlan(
            horizon=horizon, intervals=[], feasible=False, reason=str(exc), blocking_time=None
        )
    eps_bar = eps_bar_choice.delta
    cap = cfg.max_interval_length or math.inf

    # Precompute the eps/delta search on a K grid and round queries UP to the
    # next grid constant: delta* is decreasing in K, so the looked-up delta is
    # still certified for the smaller true K (gamma re-verified per interval).
    k_lo = max(min(sched.k(horizon), k_max), 1e-12)
    if k_max / k_lo > 1.0 + 1e-9:
        k_grid = np.geomspace(k_lo, k_max, 160)
    else:
        k_grid = np.array([k_max])
    grid_choices = [max_local_interval(lip.K0, float(kv), gz, cfg) for kv in k_grid]

    def choice_at(t_b: float) -> IntervalChoice:
        k_term = sched.k(t_b)
        idx = int(np.searchsorted(k_grid, k_term, side="left"))
        idx = min(idx, len(k_grid) - 1)
        ch = grid_choices[idx]
        return IntervalChoice(delta=min(ch.delta, cap), eps=ch.eps, gamma=ch.gamma)

    intervals: list[IntervalRecord] = []
    if sched.is_constant() and cap == math.inf:
        ch = choice_at(horizon)
        m = max(int(math.ceil(horizon / ch.delta - 1e-12)), 1)
        delta = horizon / m
        gamma = contraction_constants(lip.with_terminal(sched.k(horizon)), ch.eps, delta).gamma
        for i in range(m, 0, -1):
            intervals.append(
                IntervalRecord(
                    t_a=(i - 1) * delta,
                    t_b=i * delta,
                    eps=ch.eps,
                    gamma=gamma,
                    K_terminal_used=sched.k(i * delta),
                )
            )
        intervals.reverse()
        return StepPlan(
            horizon=horizon, intervals=intervals, feasible=True, eps_bar=eps_bar, K_max=k_max
        )

    floor = min(eps_bar, cap) / 2.0
    t_b = horizon
    while t_b > 1e-14 * horizon:
        if len(intervals) >= cfg.max_intervals:
            return StepPlan(
                horizon=horizon,
                intervals=[],
                feasible=False,
                blocking_time=t_b,
                reason=f"interval budget {cfg.max_intervals} exhausted at t = {t_b:.6g}",
            )
        ch = choice_at(t_b)
        if not np.isfinite(ch.delta) or ch.delta <= 0:
            return StepPlan(
                horizon=horizon,
                intervals=[],
                feasible=False,
                blocking_time=t_b,
                reason=f"no positive certified interval at t = {t_b:.6g}",
            )
        delta = min(ch.delta, t_b)
        residual = t_b - delta
        if 0.0 < residual < floor:
            # never leave a fragment shorter than half the uniform floor
            delta = t_b / 2.0 if t_b - floor < floor else t_b - floor
        t_a = max(t_b - delta, 0.0)
        gamma = contraction_constants(
            lip.with_terminal(sched.k(t_b)), ch.eps, t_b - t_a
        ).gamma
        intervals.append(
            IntervalRecord(t_a=t_a, t_b=t_b, eps=ch.eps, gamma=gamma, K_terminal_used=sched.k(t_b))
        )
        t_b = t_a
    intervals.reverse()
    return StepPlan(
        horizon=horizon, intervals=intervals, feasible=True, eps_bar=eps_bar, K_max=k_max
    )
