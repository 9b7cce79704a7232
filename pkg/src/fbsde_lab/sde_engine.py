"""Forward Euler-Maruyama simulation with reproducible Brownian batches.

The Picard loop reuses one BrownianBatch across iterations (common random
numbers), which makes the empirical contraction factor of the fixed-point map
measurable; paired solvers (stability) reuse batches across problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, SimulationError, UsageError
from .path_space import DiscretePath, PathEnsemble, TimeGrid
from .problem import FBSDEProblem


class BrownianBatch:
    """i.i.d. N(0, dt I_n) increments, bit-reproducible from (grid, n_paths, dim, seed).

    Storage is time-major (step, path, dim) in float32 (SFC64 stream), which
    the hot kernels consume directly; the path-major ``increments`` view
    (path, step, dim) satisfies the [path][step] indexing convention. Arrays
    materialize lazily on first access and regenerate bit-identically from
    the seed.
    """

    def __init__(self, grid: TimeGrid, n_paths: int, dim: int, seed: int):
        if n_paths < 1:
            raise UsageError("n_paths must be >= 1")
        self.grid = grid
        self.n_paths = n_paths
        self.dim = dim
        self.seed = seed
        self._tm = None

    @property
    def increments_tm(self) -> np.ndarray:
        if self._tm is None:
            rng = np.random.Generator(np.random.SFC64(self.seed))
            inc = rng.standard_normal(
                (self.grid.n_steps, self.n_paths, self.dim), dtype=np.float32
            )
            inc *= np.float32(np.sqrt(self.grid.dt))
            self._tm = inc
        return self._tm

    @property
    def increments(self) -> np.ndarray:
        return self.increments_tm.transpose(1, 0, 2)


def generate_brownian(grid: TimeGrid, n_paths: int, seed: int, dim: int = 1) -> BrownianBatch:
    return BrownianBatch(grid=grid, n_paths=n_paths, dim=dim, seed=seed)


class ZeroCandidate:
    """The Picard starting point (y, z) = (0, 0)."""

    def __init__(self, n_paths: int, n: int):
        self._y = np.zeros((n_paths, n))
        self._z = np.zeros((n_paths, n, n))

    def y_at(self, k: int) -> np.ndarray:
        return self._y

    def z_at(self, k: int) -> np.ndarray:
        return self._z


class ArrayCandidate:
    """Backward processes stored per path and per step of the interval grid."""

    def __init__(self, y: np.ndarray, z: np.ndarray):
        self.y = np.asarray(y, dtype=np.float64)  # (P, S+1, n)
        self.z = np.asarray(z, dtype=np.float64)  # (P, S, n, n)
        if self.y.ndim != 3 or self.z.ndim != 4:
            raise UsageError("ArrayCandidate expects y (P,S+1,n) and z (P,S,n,n)")

    def y_at(self, k: int) -> np.ndarray:
        return self.y[:, k]

    def z_at(self, k: int) -> np.ndarray:
        return self.z[:, min(k, self.z.shape[1] - 1)]


def _prefix_values(x_prefix, n_paths: int, d: int, grid: TimeGrid):
    """Normalize the initial condition to (values (P, m+1, d), start_time)."""
    if isinstance(x_prefix, PathEnsemble):
        if x_prefix.n_paths != n_paths:
            raise GridMismatchError("prefix ensemble path count differs from noise batch")
        if abs(x_prefix.grid.T - grid.t0) > 1e-9:
            raise GridMismatchError("prefix must end where the noise grid starts")
        if abs(x_prefix.grid.dt - grid.dt) > 1e-12 * max(1.0, grid.dt):
            raise GridMismatchError(
                "prefix grid step differs from interval step; path-dependent "
                "multi-interval solves need a uniform global step"
            )
        return x_prefix.values, x_prefix.grid.t0
    if isinstance(x_prefix, DiscretePath):
        vals = np.broadcast_to(x_prefix.values, (n_paths,) + x_prefix.values.shape)
        ens = PathEnsemble(x_prefix.grid, np.array(vals))
        return _prefix_values(ens, n_paths, d, grid)
    arr = np.asarray(x_prefix, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (n_paths, d)).copy()
    if arr.shape != (n_paths, d):
        raise UsageError(f"point prefix must have shape ({n_paths}, {d}) or ({d},)")
    return arr[:, None, :], grid.t0


def simulate_forward(
    p: FBSDEProblem,
    cand,
    x_prefix,
    noise: BrownianBatch,
) -> PathEnsemble:
    """Euler-Maruyama under a frozen backward candidate.

    X_{k+1} = X_k + b(t_k, X_prefix, y_k, z_k) dt + sigma(t_k, ...) dW_k.
    x_prefix is either a point state (array, broadcast over paths) or a
    path/ensemble ending at the first noise grid point; its values are
    prepended so path-dependent coefficients see the honest history.
    """
    grid = noise.grid
    if noise.dim != p.n:
        raise UsageError(f"noise dimension {noise.dim} != problem n={p.n}")
    n_paths, s = noise.n_paths, grid.n_steps
    pre, _t0 = _prefix_values(x_prefix, n_paths, p.d, grid)
    m = pre.shape[1] - 1  # prefix steps
    values = np.empty((n_paths, m + s + 1, p.d))
    values[:, : m + 1] = pre
    dt = grid.dt
    dw = noise.increments
    for k in range(s):
        t_k = grid.t0 + k * dt
        j = m + k
        if p.markovian:
            x_view = values[:, j : j + 1, :]
        else:
            x_view = values[:, : j + 1, :]
        y_k = cand.y_at(k)
        z_k = cand.z_at(k)
        b = np.broadcast_to(
            np.asarray(p.drift(t_k, x_view, y_k, z_k), dtype=np.float64), (n_paths, p.d)
        )
        sig = np.broadcast_to(
            np.asarray(p.diffusion(t_k, x_view, y_k, z_k), dtype=np.float64),
            (n_paths, p.d, p.n),
        )
        values[:, j + 1] = values[:, j] + b * dt + np.einsum(
            "pdn,pn->pd", sig, np.asarray(dw[:, k], dtype=np.float64)
        )
    if not np.all(np.isfinite(values)):
        bad = np.where(~np.isfinite(values).all(axis=(0, 2)))[0]
        step = int(bad[0]) - m if bad.size else -1
        raise SimulationError(f"non-finite forward state at step {step}", step=step)
    if m == 0:
        return PathEnsemble(grid, values)
    full_grid = TimeGrid(_t0, grid.T, m + s)
    return PathEnsemble(full_grid, values)


def _as_flat32(a, n_paths: int):
    """Coefficient output as a float32 (P,) array or a python float."""
    arr = np.asarray(a)
    if arr.size == n_paths:
        return arr.reshape(n_paths).astype(np.float32, copy=False)
    if arr.size == 1:
        return float(arr.reshape(-1)[0])
    raise UsageError("coefficient output has unexpected size")


def forward_1d_tm(
    p: FBSDEProblem,
    grid: TimeGrid,
    start: np.ndarray,
    dw_tm: np.ndarray,
    y_tm_cand: np.ndarray,
    z_tm_cand: np.ndarray,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Time-major Euler step loop for d = n = 1: fills x_tm (S+1, P) float32.

    Same scheme as simulate_forward, specialized to scalar state with
    contiguous per-step rows; coefficients receive path-major views and may
    return scalars or per-path arrays.
    """
    s = grid.n_steps
    n_paths = start.shape[0]
    dt = grid.dt
    x_tm = out if out is not None else np.empty((s + 1, n_paths), dtype=np.float32)
    x_tm[0] = start
    z_last = z_tm_cand.shape[0] - 1
    tmp = np.empty(n_paths, dtype=np.float32)
    dt32 = np.float32(dt)
    for k in range(s):
        t_k = grid.t0 + k * dt
        if p.markovian:
            x_view = x_tm[k][:, None, None]
        else:
            x_view = x_tm[: k + 1].T[:, :, None]
        y_k = y_tm_cand[k][:, None]
        z_k = z_tm_cand[min(k, z_last)][:, None, None]
        b = _as_flat32(p.drift(t_k, x_view, y_k, z_k), n_paths)
        sig = _as_flat32(p.diffusion(t_k, x_view, y_k, z_k), n_paths)
        row = x_tm[k + 1]
        if isinstance(b, float):
            if b == 0.0:
                np.copyto(row, x_tm[k])
            else:
                np.add(x_tm[k], np.float32(b * dt), out=row)
        else:
            np.multiply(b, dt32, out=tmp)
            np.add(x_tm[k], tmp, out=row)
        if isinstance(sig, float):
            if sig != 0.0:
                np.multiply(dw_tm[k], np.float32(sig), out=tmp)
                np.add(row, tmp, out=row)
        else:
            np.multiply(sig, dw_tm[k], out=tmp)
            np.add(row, tmp, out=row)
    if not np.all(np.isfinite(x_tm[-1])):
        for k in range(s):
            if not np.all(np.isfinite(x_tm[k + 1])):
                raise SimulationError(f"non-finite forward state at step {k}", step=k)
        raise SimulationError("non-finite forward state", step=s - 1)
    return x_tm
