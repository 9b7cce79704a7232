"""Discrete paths on uniform time grids and the quadratic path (semi-)norm.

The norm of a path x up to grid index k is

    norm_sq(x, k) = sum_{j<k} |x(t_j)|^2 dt + |x(t_k)|^2,

a left-rectangle quadrature of the integral part: it only reads values
strictly before t_k plus the endpoint, so it is adapted (no peeking) and
exactly representable in backward inductions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, JunctionMismatchError, UsageError
from ._kernels import prefix_sq_norms

TOL_CONCAT = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = t0 + k*dt on [t0, T] with n_steps steps."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise UsageError(f"TimeGrid needs T > t0, got [{self.t0}, {self.T}]")
        if self.n_steps < 1:
            raise UsageError(f"TimeGrid needs n_steps >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def points(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Grid index of time t; errors if t is not (close to) a grid point."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.dt - t) > tol * max(1.0, abs(t)):
            raise UsageError(f"t={t} is not a grid point of {self}")
        return k

    def compatible(self, other: "TimeGrid", tol: float = 1e-12) -> bool:
        return (
            self.n_steps == other.n_steps
            and abs(self.t0 - other.t0) <= tol
            and abs(self.T - other.T) <= tol
        )


def _as_values(values, d=None) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2:
        raise UsageError(f"path values must be (n_points, d), got shape {v.shape}")
    if d is not None and v.shape[1] != d:
        raise UsageError(f"path values have dimension {v.shape[1]}, expected {d}")
    return v


@dataclass(frozen=True)
class DiscretePath:
    """A sampled path: one state vector in R^d per grid point. Immutable."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = _as_values(self.values)
        if v.shape[0] != self.grid.n_points:
            raise UsageError(
                f"path has {v.shape[0]} values for a grid with {self.grid.n_points} points"
            )
        if not np.all(np.isfinite(v)):
            raise UsageError("path values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def value_at(self, k: int) -> np.ndarray:
        return self.values[k]


@dataclass(frozen=True)
class PathEnsemble:
    """n_paths sampled paths sharing one grid; values shaped (n_paths, n_points, d)."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim != 3:
            raise UsageError(f"ensemble values must be (n_paths, n_points, d), got {v.shape}")
        if v.shape[1] != self.grid.n_points:
            raise UsageError("ensemble second axis must match grid point count")
        object.__setattr__(self, "values", v)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def path(self, i: int) -> DiscretePath:
        return DiscretePath(self.grid, self.values[i])

    def norm_sq_table(self) -> np.ndarray:
        """Running ((n_paths, n_points)) table of norm_sq at every index."""
        return prefix_sq_norms(self.values, self.grid.dt)


def _check_index(p: DiscretePath, k: int):
    if not 0 <= k <= p.grid.n_steps:
        raise UsageError(f"grid index {k} out of range [0, {p.grid.n_steps}]")


def path_norm_sq(p: DiscretePath, k: int) -> float:
    """Squared path norm at index k: left-rectangle integral of |x|^2 plus |x(t_k)|^2."""
    _check_index(p, k)
    sq = np.einsum("jd,jd->j", p.values[: k + 1], p.values[: k + 1])
    return float(np.sum(sq[:k]) * p.grid.dt + sq[k])


def path_distance_sq(p: DiscretePath, q: DiscretePath, k: int) -> float:
    """Squared norm of the pointwise difference p - q at index k."""
    if not p.grid.compatible(q.grid):
        raise GridMismatchError("paths live on different grids")
    diff = DiscretePath(p.grid, p.values - q.values)
    return path_norm_sq(diff, k)


def path_concat(prefix: DiscretePath, suffix: DiscretePath, tol: float = TOL_CONCAT) -> DiscretePath:
    """Join a prefix ending at t* with a suffix starting at t*; junction value from prefix."""
    if abs(prefix.grid.T - suffix.grid.t0) > tol:
        raise GridMismatchError(
            f"prefix ends at {prefix.grid.T} but suffix starts at {suffix.grid.t0}"
        )
    if abs(prefix.grid.dt - suffix.grid.dt) > tol * max(1.0, prefix.grid.dt):
        raise GridMismatchError("prefix and suffix use different step sizes")
    if prefix.d != suffix.d:
        raise GridMismatchError("prefix and suffix have different state dimensions")
    gap = float(np.max(np.abs(prefix.values[-1] - suffix.values[0])))
    if gap > tol:
        raise JunctionMismatchError(
            f"junction mismatch {gap:.3e} exceeds tol_concat={tol:.3e}"
        )
    grid = TimeGrid(prefix.grid.t0, suffix.grid.T, prefix.grid.n_steps + suffix.grid.n_steps)
    values = np.concatenate([prefix.values, suffix.values[1:]], axis=0)
    return DiscretePath(grid, values)
