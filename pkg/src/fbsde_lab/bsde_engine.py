"""Backward induction for the decoupled BSDE via regression Monte Carlo.

Per step, conditional expectations are ridge least-squares fits on a feature
basis of the forward state (and, for path-dependent problems, its running
integral, the natural summary statistic of the quadratic path norm). The
martingale integrand Z is regressed from centered increments

    Z_k ~ E[ (Y_{k+1} - E_k[Y_{k+1}]) dW_k^T | features_k ] / dt,

which has O(1) variance in dt (the uncentered estimator's variance grows like
1/dt); the centering term has zero conditional mean, so the estimator is
unchanged in expectation. ``center_z=False`` restores the raw estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement

import numpy as np

from . import _kernels
from ._kernels import numpy_impl
from .errors import RegressionError, UsageError
from .path_space import PathEnsemble
from .problem import FBSDEProblem, coeff_batch
from .sde_engine import BrownianBatch


@dataclass(frozen=True)
class RegressionConfig:
    """basis: 'auto' picks markov_poly for Markovian problems, path_features otherwise."""

    basis: str = "auto"
    degree: int = 2
    n_lags: int = 0
    ridge_lambda: float | None = None  # None: 1e-8 * trace(feature covariance) / n_features
    min_paths_per_regression: int = 8
    center_z: bool = True
    implicit_f: bool = False
    implicit_iters: int = 5
    implicit_tol: float = 1e-10

    def __post_init__(self):
        if self.degree < 0:
            raise UsageError("degree must be >= 0")
        if self.ridge_lambda is not None and self.ridge_lambda < 0:
            raise UsageError("ridge_lambda must be >= 0")
        if self.basis not in ("auto", "markov_poly", "path_features"):
            raise UsageError(f"unknown basis {self.basis!r}")


@dataclass(frozen=True)
class FeatureBasis:
    """Monomial basis over the state (markov_poly) or (state, running integral)."""

    kind: str
    degree: int
    d: int
    n_lags: int = 0

    @property
    def n_vars(self) -> int:
        base = self.d if self.kind == "markov_poly" else 2 * self.d
        return base + self.n_lags * self.d

    @property
    def n_features(self) -> int:
        count = 1
        for total in range(1, self.degree + 1):
            count += len(list(combinations_with_replacement(range(self.n_vars), total)))
        return count

    def build(self, x_state: np.ndarray, integral: np.ndarray, lags: np.ndarray | None = None) -> np.ndarray:
        """Feature rows (P, F) from state (P, d), running integral (P, d), lags (P, n_lags, d)."""
        cols = [x_state]
        if self.kind == "path_features":
            cols.append(integral)
        if self.n_lags:
            if lags is None:
                raise UsageError("basis requires lagged states")
            cols.append(lags.reshape(x_state.shape[0], -1))
        v = np.concatenate(cols, axis=1)
        p = v.shape[0]
        out = np.empty((p, self.n_features))
        out[:, 0] = 1.0
        col = 1
        for total in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(self.n_vars), total):
                acc = np.ones(p)
                for idx in combo:
                    acc = acc * v[:, idx]
                out[:, col] = acc
                col += 1
        return out

    def kernel_id(self) -> int | None:
        """Kernel basis code when the jitted 1-d sweep supports this basis."""
        if self.d != 1 or self.n_lags != 0:
            return None
        if self.kind == "markov_poly" and 0 <= self.degree <= 6:
            return numpy_impl.BASIS_MARKOV
        if self.kind == "path_features" and 0 <= self.degree <= 2:
            return numpy_impl.BASIS_PATH
        return None


def make_basis(cfg: RegressionConfig, problem: FBSDEProblem) -> FeatureBasis:
    kind = cfg.basis
    if kind == "auto":
        path_dep = (not problem.markovian) or (not problem.terminal_markovian)
        kind = "path_features" if path_dep else "markov_poly"
    return FeatureBasis(kind=kind, degree=cfg.degree, d=problem.d, n_lags=cfg.n_lags)


@dataclass
class RegressionEstimator:
    coef: np.ndarray  # (F, m)
    lam: float

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        return features @ self.coef


def condexp_regress(features: np.ndarray, targets: np.ndarray, cfg: RegressionConfig) -> RegressionEstimator:
    """Ridge least-squares estimator of E[target | features]."""
    feats = np.asarray(features, dtype=np.float64)
    targ = np.asarray(targets, dtype=np.float64)
    if targ.ndim == 1:
        targ = targ[:, None]
    if feats.ndim != 2 or targ.ndim != 2 or feats.shape[0] != targ.shape[0]:
        raise UsageError("features and targets must be row-aligned 2-d arrays")
    if feats.shape[0] < cfg.min_paths_per_regression:
        raise RegressionError(
            f"{feats.shape[0]} rows < min_paths_per_regression={cfg.min_paths_per_regression}"
        )
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(targ))):
        raise RegressionError("non-finite entries in regression inputs")
    ridge_user = -1.0 if cfg.ridge_lambda is None else float(cfg.ridge_lambda)
    g = feats.T @ feats
    u = feats.T @ targ
    coef, lam, ok = numpy_impl._fit_from_normal(g, u, feats.shape[0], ridge_user, numpy_impl.RIDGE_REL_DEFAULT)
    if not ok:
        raise RegressionError(
            "normal equations are rank deficient; set ridge_lambda > 0 (or leave it automatic)"
        )
    return RegressionEstimator(coef=coef, lam=lam)


def estimate_z(
    y_next: np.ndarray,
    dw: np.ndarray,
    dt: float,
    features: np.ndarray,
    cfg: RegressionConfig,
    y_cond: np.ndarray | None = None,
) -> tuple[np.ndarray, RegressionEstimator]:
    """Fit Z from martingale increments: regress (y_next - y_cond) dW^T / dt on features."""
    y_next = np.asarray(y_next, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    n = y_next.shape[1]
    base = y_next if (y_cond is None or not cfg.center_z) else y_next - y_cond
    targets = np.einsum("pi,pj->pij", base, dw).reshape(-1, n * n) / dt
    est = condexp_regress(features, targets, cfg)
    fitted = est.evaluate(features).reshape(-1, n, n)
    return fitted, est


class BackwardSolution:
    """Per-path (Y, Z) plus per-step regression tables for out-of-sample evaluation.

    The 1-d fast route stores time-major arrays internally; the path-major
    views Y (P, S+1, n) and Z (P, S, n, n) materialize lazily on first access.
    """

    def __init__(self, grid, basis, y_coef, z_coef, lambdas, Y=None, Z=None, y_tm=None, z_tm=None):
        self.grid = grid
        self.basis = basis
        self.y_coef = y_coef  # (S, F, n)
        self.z_coef = z_coef  # (S, F, n*n)
        self.lambdas = lambdas
        self._y = Y
        self._z = Z
        self.y_tm = y_tm  # (S+1, P) when produced by the 1-d fast route
        self.z_tm = z_tm  # (S, P)

    @property
    def Y(self) -> np.ndarray:
        if self._y is None:
            self._y = np.ascontiguousarray(self.y_tm.T)[:, :, None]
        return self._y

    @property
    def Z(self) -> np.ndarray:
        if self._z is None:
            self._z = np.ascontiguousarray(self.z_tm.T)[:, :, None, None]
        return self._z


def running_integral(values: np.ndarray, dt: float, integral0: np.ndarray | None = None) -> np.ndarray:
    """Left-rectangle running integral of the path values: (P, S+1, d)."""
    p, s1, d = values.shape
    out = np.empty_like(values)
    out[:, 0] = 0.0 if integral0 is None else integral0
    np.cumsum(values[:, :-1] * dt, axis=1, out=out[:, 1:])
    if integral0 is not None:
        out[:, 1:] += integral0[:, None, :]
    return out


def solve_backward(
    p: FBSDEProblem,
    ensemble: PathEnsemble,
    terminal: np.ndarray,
    noise: BrownianBatch,
    cfg: RegressionConfig,
    integral0: np.ndarray | None = None,
) -> BackwardSolution:
    """Backward recursion on the noise grid; the ensemble may carry a longer prefix.

    The terminal row of Y is the supplied terminal values, copied verbatim.
    """
    grid = noise.grid
    s = grid.n_steps
    n_paths = ensemble.n_paths
    if noise.n_paths != n_paths:
        raise UsageError("ensemble and noise path counts differ")
    offset = ensemble.grid.n_points - (s + 1)
    if offset < 0:
        raise UsageError("ensemble grid shorter than the noise grid")
    terminal = np.asarray(terminal, dtype=np.float64)
    if terminal.shape != (n_paths, p.n):
        raise UsageError(f"terminal must have shape ({n_paths}, {p.n})")
    if not np.all(np.isfinite(terminal)):
        raise RegressionError("non-finite terminal values")
    if n_paths < cfg.min_paths_per_regression:
        raise RegressionError(
            f"{n_paths} paths < min_paths_per_regression={cfg.min_paths_per_regression}"
        )
    basis = make_basis(cfg, p)
    dt = grid.dt
    values = ensemble.values
    integ = running_integral(values, dt, None)
    if integral0 is not None:
        integ = integ + np.asarray(integral0)[:, None, :]

    kernel_basis = basis.kernel_id()
    if p.d == 1 and p.n == 1 and p.driver_is_zero and kernel_basis is not None and not cfg.implicit_f:
        ridge_user = -1.0 if cfg.ridge_lambda is None else float(cfg.ridge_lambda)
        y1, z1, ycoef, zcoef, lambdas, status = _kernels.backward_sweep_1d(
            values[:, offset:, 0],
            integ[:, offset:, 0],
            noise.increments[:, :, 0],
            dt,
            terminal[:, 0],
            kernel_basis,
            basis.degree,
            ridge_user,
            numpy_impl.RIDGE_REL_DEFAULT,
            cfg.center_z,
        )
        if status >= 0:
            raise RegressionError(
                "regression failed (rank deficiency); set ridge_lambda > 0", step=int(status)
            )
        return BackwardSolution(
            grid,
            basis,
            ycoef[:, :, None],
            zcoef[:, :, None],
            lambdas,
            Y=y1[:, :, None],
            Z=z1[:, :, None, None],
        )

    f_features = basis.n_features
    y = np.empty((n_paths, s + 1, p.n))
    z = np.empty((n_paths, s, p.n, p.n))
    y_coef = np.zeros((s, f_features, p.n))
    z_coef = np.zeros((s, f_features, p.n * p.n))
    lambdas = np.zeros(s)
    y[:, s] = terminal
    for k in range(s - 1, -1, -1):
        j = offset + k
        feats = basis.build(values[:, j], integ[:, j])
        try:
            est_c = condexp_regress(feats, y[:, k + 1], cfg)
            cont = est_c.evaluate(feats)
            z_k, est_z = estimate_z(y[:, k + 1], noise.increments[:, k], dt, feats, cfg, y_cond=cont)
        except RegressionError as exc:
            raise RegressionError(f"step {k}: {exc}", step=k) from exc
        z[:, k] = z_k
        if p.driver_is_zero:
            y_k = cont
            est_y = est_c
        else:
            t_k = grid.t0 + k * dt
            x_view = values[:, j : j + 1, :] if p.markovian else values[:, : j + 1, :]
            y_proxy = cont
            est_y = est_c
            iters = cfg.implicit_iters if cfg.implicit_f else 1
            for _ in range(iters):
                f_val = coeff_batch(p.driver(t_k, x_view, y_proxy, z_k), n_paths, p.n)
                target = y[:, k + 1] + f_val * dt
                try:
                    est_y = condexp_regress(feats, target, cfg)
                except RegressionError as exc:
                    raise RegressionError(f"step {k}: {exc}", step=k) from exc
                y_new = est_y.evaluate(feats)
                if not cfg.implicit_f or np.max(np.abs(y_new - y_proxy)) <= cfg.implicit_tol:
                    y_proxy = y_new
                    break
                y_proxy = y_new
            y_k = y_proxy
        if not np.all(np.isfinite(y_k)):
            raise RegressionError(f"non-finite Y at step {k}", step=k)
        y[:, k] = y_k
        y_coef[k] = est_y.coef[:, : p.n]
        z_coef[k] = est_z.coef
        lambdas[k] = est_c.lam
    return BackwardSolution(grid, basis, y_coef, z_coef, lambdas, Y=y, Z=z)
