"""Local small-interval solver: the contraction map (y,z) -> (Y,Z) iterated
to its fixed point, plus exact evaluation of the closed-form contraction
constants that certify the map's Lipschitz factor gamma(eps, T).

All distances use the solver norm

    ||(y,z)||^2 = sup_k E[ |y_k|^2 + sum_{j>=k} |z_j|^2 dt ],

with the sample mean standing in for the expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import numpy_impl
from .bsde_engine import BackwardSolution, RegressionConfig, make_basis, solve_backward
from .errors import ConvergenceError, InfeasibleError, RegressionError, UsageError
from .path_space import PathEnsemble, TimeGrid
from .problem import FBSDEProblem, LipschitzData, check_small_time_condition
from .sde_engine import (
    ArrayCandidate,
    BrownianBatch,
    ZeroCandidate,
    forward_1d_tm,
    simulate_forward,
)


@dataclass(frozen=True)
class ContractionConstants:
    eps: float
    T_loc: float
    C_eps: float
    C_tilde_eps: float
    C_y: float
    C_z: float
    gamma: float


def contraction_constants(lip: LipschitzData, eps: float, T_loc: float) -> ContractionConstants:
    """Closed-form constants of the fixed-point map on an interval of length T_loc.

    gamma < 1 certifies the map (y,z) -> (Y,Z) is a contraction; for fixed eps,
    gamma converges to K1^2 (2 K0 eps + |grad_z sigma|^2) + K0 eps as T_loc -> 0.
    """
    if eps <= 0 or T_loc <= 0:
        raise UsageError("eps and T_loc must be positive")
    k0, k1, s = lip.K0, lip.K1, lip.grad_z_sigma
    t = T_loc
    c_eps = 2.0 * k0 * k0 * (1.0 + k0 / eps) * (1.0 + t) + k0 * (3.0 + t + 1.0 / eps)
    c_tilde = k0 * (2.0 + 1.0 / eps)
    ect = math.exp(min(c_eps * t, 700.0)) if c_eps * t < 700.0 else math.inf
    c_y = (t + 1.0) * k1 * k1 * ect * c_eps + k0 + t * (t + 1.0) * k0 * ect * c_eps
    c_z = (t + 1.0) * k1 * k1 * ect * (2.0 * k0 * eps + s * s) + k0 * (
        eps + t * (t + 1.0) * ect * (3.0 * k0 * eps + s * s)
    )
    ctt = c_tilde * t
    ett = math.exp(min(ctt, 700.0)) if ctt < 700.0 else math.inf
    factor = ctt * ett + 1.0
    gamma = t * factor * c_y + factor * c_z
    return ContractionConstants(
        eps=eps, T_loc=T_loc, C_eps=c_eps, C_tilde_eps=c_tilde, C_y=c_y, C_z=c_z, gamma=gamma
    )


def gamma_small_time_limit(lip: LipschitzData, eps: float) -> float:
    """Limit of gamma(eps, T) as T -> 0."""
    return lip.K1**2 * (2.0 * lip.K0 * eps + lip.grad_z_sigma**2) + lip.K0 * eps


def best_gamma(lip: LipschitzData, t_loc: float, eps_grid: np.ndarray | None = None):
    """Minimum gamma over an eps grid; diagnostic for unplanned local solves."""
    if eps_grid is None:
        eps_grid = np.geomspace(1e-4, 10.0, 60)
    best = (math.inf, float(eps_grid[0]))
    for eps in eps_grid:
        g = contraction_constants(lip, float(eps), t_loc).gamma
        if g < best[0]:
            best = (g, float(eps))
    return best  # (gamma, eps)


def solution_norm_sq(y: np.ndarray, z: np.ndarray, dt: float) -> float:
    """sup_k mean[|y_k|^2] + sum_{j>=k} mean[|z_j|^2] dt over the interval grid."""
    a = np.einsum("pkn,pkn->k", y, y) / y.shape[0]
    b = np.einsum("pkij,pkij->k", z, z) / z.shape[0] if z.size else np.zeros(0)
    suffix = np.zeros(y.shape[1])
    if b.size:
        suffix[:-1] = np.cumsum((b * dt)[::-1])[::-1]
    return float(np.max(a + suffix))


@dataclass
class PicardConfig:
    tol_fixed_point: float = 1e-6
    max_iters: int = 50
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    eps: float | None = None          # planner-chosen eps (enables gamma enforcement)
    k_terminal: float | None = None   # terminal Lipschitz constant for this interval
    enforce_contraction: bool = False
    raise_on_nonconvergence: bool = True
    initial_candidate: tuple | None = None  # optional (y, z) start instead of (0, 0)


class Workspace:
    """Reusable scratch buffers for repeated local solves of one shape.

    Callers that pass a workspace promise to consume each LocalSolution's
    arrays before the next local_solve call (the buffers are recycled).
    """

    def __init__(self):
        self._arrays = {}

    def get(self, key: str, shape: tuple, dtype=np.float32) -> np.ndarray:
        arr = self._arrays.get(key)
        if arr is None or arr.shape != shape or arr.dtype != dtype:
            arr = np.empty(shape, dtype=dtype)
            self._arrays[key] = arr
        return arr

    def zeros(self, key: str, shape: tuple, dtype=np.float32) -> np.ndarray:
        arr = self._arrays.get(key)
        if arr is None or arr.shape != shape or arr.dtype != dtype:
            arr = np.zeros(shape, dtype=dtype)
            self._arrays[key] = arr
        return arr


@dataclass
class LocalSolution:
    interval: tuple
    ensemble: PathEnsemble
    backward: BackwardSolution
    iterations: int
    residual_history: list
    converged: bool
    diagnostics: dict
    x_tm: np.ndarray | None = None  # (S+1, P) when solved on the 1-d fast route


def _point_states(x_prefix, d: int, n_paths: int):
    """Start states (P,) when the prefix is point-like and d = 1, else None."""
    if hasattr(x_prefix, "grid"):
        return None
    arr = np.asarray(x_prefix, dtype=np.float64)
    if arr.ndim == 2 and arr.shape == (n_paths, 1) and d == 1:
        return np.ascontiguousarray(arr[:, 0])
    if arr.ndim == 1 and d == 1 and arr.shape[0] == 1:
        return np.full(n_paths, float(arr[0]))
    return None


def _fast_route_ok(p: FBSDEProblem, grid: TimeGrid, cfg: PicardConfig, states) -> bool:
    if states is None or p.d != 1 or p.n != 1 or not p.driver_is_zero:
        return False
    if cfg.regression.implicit_f:
        return False
    basis = make_basis(cfg.regression, p)
    if basis.kernel_id() is None:
        return False
    if (p.markovian and p.terminal_markovian) or abs(grid.t0) <= 1e-12:
        return True
    return False


def _local_solve_fast_1d(
    p, states, terminal_fn, grid, noise, cfg, integral0, gamma, eps_used, k_term, workspace
):
    """Time-major Picard loop for scalar problems with zero driver.

    Arrays are float32 (regression and residual algebra accumulate in
    float64); buffers come from the workspace and are recycled across calls.
    """
    s = grid.n_steps
    n_paths = noise.n_paths
    dt = grid.dt
    basis = make_basis(cfg.regression, p)
    kernel_basis = basis.kernel_id()
    ws = workspace if workspace is not None else Workspace()
    dw_tm = noise.increments_tm[:, :, 0]
    ridge_user = -1.0 if cfg.regression.ridge_lambda is None else float(cfg.regression.ridge_lambda)
    use_integral = kernel_basis == numpy_impl.BASIS_PATH
    i0 = None
    if integral0 is not None:
        i0 = np.asarray(integral0, dtype=np.float64).reshape(-1).astype(np.float32)
    x_tm = ws.get("x", (s + 1, n_paths))
    y_bufs = (ws.get("y_a", (s + 1, n_paths)), ws.get("y_b", (s + 1, n_paths)))
    z_bufs = (ws.get("z_a", (s, n_paths)), ws.get("z_b", (s, n_paths)))
    if cfg.initial_candidate is not None:
        # candidate arrives path-major: y (P, S+1, n), z (P, S, n, n)
        y_init, z_init = cfg.initial_candidate
        y_old = np.ascontiguousarray(np.asarray(y_init)[:, :, 0].T).astype(np.float32)
        z_old = np.ascontiguousarray(np.asarray(z_init)[:, :, 0, 0].T).astype(np.float32)
    else:
        y_old = ws.zeros("y0", (s + 1, n_paths))
        z_old = ws.zeros("z0", (s, n_paths))
    history: list[float] = []
    ratios: list[float] = []
    converged = False
    iterations = 0
    i_tm = ycoef = zcoef = lambdas = None
    y_out = z_out = None
    for m in range(1, cfg.max_iters + 1):
        iterations = m
        forward_1d_tm(p, grid, states, dw_tm, y_old, z_old, out=x_tm)
        if use_integral:
            i_tm = ws.get("i", (s + 1, n_paths))
            i_tm[0] = 0.0 if i0 is None else i0
            np.cumsum(x_tm[:-1] * np.float32(dt), axis=0, out=i_tm[1:])
            if i0 is not None:
                i_tm[1:] += i0[None, :]
        else:
            i_tm = x_tm  # unused by the markov kernels
        if p.terminal_markovian and not use_integral:
            values_view = x_tm.T[:, :, None]
        else:
            # path-scanning terminals (path-dependent g or path-feature field
            # representations) get a contiguous path-major copy
            values_view = np.ascontiguousarray(x_tm.T)[:, :, None]
        tvals = np.asarray(terminal_fn(values_view, dt, integral0), dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(tvals)):
            raise RegressionError("non-finite terminal values")
        y_out = y_bufs[m % 2]
        z_out = z_bufs[m % 2]
        ycoef, zcoef, lambdas, a_res, b_res, status = _kernels.backward_sweep_1d_tm(
            x_tm, i_tm, dw_tm, dt, tvals, kernel_basis, basis.degree,
            ridge_user, numpy_impl.RIDGE_REL_DEFAULT, cfg.regression.center_z,
            y_old, z_old, True, y_out, z_out,
        )
        if status >= 0:
            raise RegressionError(
                "regression failed (rank deficiency); set ridge_lambda > 0", step=int(status)
            )
        suffix = np.zeros(s + 1)
        suffix[:-1] = np.cumsum((b_res * dt)[::-1])[::-1]
        r = float(np.max(a_res + suffix))
        history.append(r)
        if len(history) >= 2 and history[-2] > 0:
            ratios.append(history[-1] / history[-2])
        if r <= cfg.tol_fixed_point:
            converged = True
            break
        y_old, z_old = y_out, z_out
    if not converged and cfg.raise_on_nonconvergence:
        raise ConvergenceError(
            f"Picard iteration did not reach {cfg.tol_fixed_point:g} in {cfg.max_iters} iterations",
            residual_history=history,
        )
    backward = BackwardSolution(
        grid, basis, ycoef[:, :, None], zcoef[:, :, None], lambdas, y_tm=y_out, z_tm=z_out
    )
    ensemble = PathEnsemble(grid, x_tm.T[:, :, None])
    return LocalSolution(
        interval=(grid.t0, grid.T),
        ensemble=ensemble,
        backward=backward,
        iterations=iterations,
        residual_history=history,
        converged=converged,
        diagnostics={
            "gamma_theoretical": gamma,
            "eps": eps_used,
            "k_terminal": k_term,
            "empirical_ratios": ratios,
            "route": "fast_1d",
        },
        x_tm=x_tm,
    )


def local_solve(
    p: FBSDEProblem,
    x_prefix,
    terminal_fn,
    grid: TimeGrid,
    noise: BrownianBatch,
    cfg: PicardConfig | None = None,
    integral0: np.ndarray | None = None,
    workspace: Workspace | None = None,
) -> LocalSolution:
    """Iterate forward simulation / backward regression to the fixed point.

    terminal_fn(values, dt, integral0) -> (P, n) receives the full simulated
    values (prefix included when one was given). Starts from (y, z) = (0, 0);
    the Brownian batch is reused across iterations (common random numbers), so
    successive residuals measure the empirical contraction factor.
    """
    cfg = cfg or PicardConfig()
    k_term = cfg.k_terminal if cfg.k_terminal is not None else p.lipschitz.K1
    lip_term = p.lipschitz.with_terminal(k_term)
    check = check_small_time_condition(lip_term)
    if not check.passed:
        raise InfeasibleError(
            f"small-time condition fails: K1*|grad_z sigma| = {check.product:g} >= 1",
            reason=f"K1*|grad_z sigma| = {check.product:g} >= 1",
        )
    t_loc = grid.T - grid.t0
    if cfg.eps is not None:
        gamma = contraction_constants(lip_term, cfg.eps, t_loc).gamma
        eps_used = cfg.eps
        if gamma >= 1.0:
            raise InfeasibleError(
                f"gamma(eps={cfg.eps:g}, T={t_loc:g}) = {gamma:g} >= 1: not a certified contraction",
                reason="gamma >= 1",
            )
    else:
        gamma, eps_used = best_gamma(lip_term, t_loc)
        if cfg.enforce_contraction and gamma >= 1.0:
            raise InfeasibleError(
                f"no eps gives gamma < 1 at interval length {t_loc:g} (best {gamma:g})",
                reason="gamma >= 1",
            )

    n_paths = noise.n_paths
    states = _point_states(x_prefix, p.d, n_paths)
    if _fast_route_ok(p, grid, cfg, states):
        return _local_solve_fast_1d(
            p, states, terminal_fn, grid, noise, cfg, integral0, gamma, eps_used, k_term, workspace
        )
    if cfg.initial_candidate is not None:
        y0, z0 = cfg.initial_candidate
        prev_y = np.asarray(y0, dtype=np.float64)
        prev_z = np.asarray(z0, dtype=np.float64)
        cand = ArrayCandidate(prev_y, prev_z)
    else:
        cand = ZeroCandidate(n_paths, p.n)
        prev_y = np.zeros((n_paths, grid.n_steps + 1, p.n))
        prev_z = np.zeros((n_paths, grid.n_steps, p.n, p.n))
    history: list[float] = []
    ratios: list[float] = []
    ens = None
    bw = None
    converged = False
    iterations = 0
    for m in range(1, cfg.max_iters + 1):
        iterations = m
        ens = simulate_forward(p, cand, x_prefix, noise)
        tvals = terminal_fn(ens.values, grid.dt, integral0)
        bw = solve_backward(p, ens, np.asarray(tvals, dtype=np.float64), noise, cfg.regression, integral0)
        r = solution_norm_sq(bw.Y - prev_y, bw.Z - prev_z, grid.dt)
        history.append(r)
        if len(history) >= 2 and history[-2] > 0:
            ratios.append(history[-1] / history[-2])
        if r <= cfg.tol_fixed_point:
            converged = True
            break
        prev_y, prev_z = bw.Y, bw.Z
        cand = ArrayCandidate(bw.Y, bw.Z)
    if not converged and cfg.raise_on_nonconvergence:
        err = ConvergenceError(
            f"Picard iteration did not reach {cfg.tol_fixed_point:g} in {cfg.max_iters} iterations",
            residual_history=history,
        )
        raise err
    return LocalSolution(
        interval=(grid.t0, grid.T),
        ensemble=ens,
        backward=bw,
        iterations=iterations,
        residual_history=history,
        converged=converged,
        diagnostics={
            "gamma_theoretical": gamma,
            "eps": eps_used,
            "k_terminal": k_term,
            "empirical_ratios": ratios,
        },
    )


def terminal_from_problem(p: FBSDEProblem):
    """Terminal functional wrapper: evaluates g on the simulated values.

    Markovian g reads only the final state; path-dependent g requires the
    values to span the path from time 0 (single-interval solves or carried
    full prefixes).
    """

    def terminal_fn(values: np.ndarray, dt: float, integral0=None):
        if p.terminal_markovian:
            return np.asarray(p.terminal(values[:, -1:, :], dt), dtype=np.float64)
        return np.asarray(p.terminal(values, dt), dtype=np.float64)

    return terminal_fn
