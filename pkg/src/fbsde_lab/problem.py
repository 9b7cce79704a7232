"""Problem definitions: coefficient functionals, Lipschitz data, structural classes.

Coefficients are vectorized across Monte Carlo paths:

    drift(t, x, y, z)     -> (P, d)      x: (P, k+1, d) prefix values up to t
    diffusion(t, x, y, z) -> (P, d, n)   y: (P, n)
    driver(t, x, y, z)    -> (P, n)      z: (P, n, n)
    terminal(x, dt)       -> (P, n)      x: full-path values (P, S+1, d)

Markovian coefficients must read only x[:, -1, :]; the engines may then pass
a one-point prefix view. Randomness enters only through simulated paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import UsageError


class ProblemClass(Enum):
    DECOUPLED = "decoupled"
    DRIFT_Y_SIGMA_X = "drift_y_sigma_x"
    SIGMA_XY = "sigma_xy"
    GENERAL = "general"


#: arguments each structural class promises the forward coefficients ignore
CLASS_IGNORES = {
    ProblemClass.DECOUPLED: {"b": ("y", "z"), "sigma": ("y", "z")},
    ProblemClass.DRIFT_Y_SIGMA_X: {"b": ("z",), "sigma": ("y", "z")},
    ProblemClass.SIGMA_XY: {"b": (), "sigma": ("z",)},
    ProblemClass.GENERAL: {"b": (), "sigma": ()},
}

#: strict-to-loose order for sub-class advisories
_CLASS_ORDER = [
    ProblemClass.DECOUPLED,
    ProblemClass.DRIFT_Y_SIGMA_X,
    ProblemClass.SIGMA_XY,
    ProblemClass.GENERAL,
]


@dataclass(frozen=True)
class CoeffLipschitz:
    """Per-argument Lipschitz constants of one coefficient under the path metric."""

    x: float
    y: float
    z: float


@dataclass(frozen=True)
class LipschitzData:
    """Declared Lipschitz hypotheses: shared K0 for (b, sigma, f), K1 for g.

    The optional per-coefficient table refines the shared K0 (every slot
    defaults to K0; sigma's z slot defaults to grad_z_sigma). Constants are
    declarations, not estimates; ``probe_lipschitz`` can spot-check them.
    """

    K0: float
    K1: float
    grad_z_sigma: float
    b: CoeffLipschitz | None = None
    sigma: CoeffLipschitz | None = None
    f: CoeffLipschitz | None = None

    def __post_init__(self):
        if self.K0 < 0 or self.K1 < 0 or self.grad_z_sigma < 0:
            raise UsageError("Lipschitz constants must be nonnegative")
        if self.grad_z_sigma > self.K0 * (1 + 1e-12) + 1e-300:
            raise UsageError("grad_z_sigma cannot exceed K0")
        for name, entry in (("b", self.b), ("sigma", self.sigma), ("f", self.f)):
            if entry is None:
                continue
            for slot in ("x", "y", "z"):
                v = getattr(entry, slot)
                if v < 0 or v > self.K0 * (1 + 1e-12) + 1e-300:
                    raise UsageError(f"{name}.{slot} Lipschitz constant outside [0, K0]")
        if self.sigma is not None and abs(self.sigma.z - self.grad_z_sigma) > 1e-12:
            raise UsageError("sigma.z in the table must equal grad_z_sigma")

    def table_b(self) -> CoeffLipschitz:
        return self.b or CoeffLipschitz(self.K0, self.K0, self.K0)

    def table_sigma(self) -> CoeffLipschitz:
        return self.sigma or CoeffLipschitz(self.K0, self.K0, self.grad_z_sigma)

    def table_f(self) -> CoeffLipschitz:
        return self.f or CoeffLipschitz(self.K0, self.K0, self.K0)

    def with_terminal(self, k1: float) -> "LipschitzData":
        return replace(self, K1=float(k1))


CoeffFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
TerminalFn = Callable[[np.ndarray, float], np.ndarray]


def coeff_batch(value, n_paths: int, *trailing: int) -> np.ndarray:
    """Normalize a coefficient output (scalar or per-path array) to
    (n_paths, *trailing) float64. Engines and probes treat outputs as
    read-only, so coefficients may return scalars or shared views."""
    arr = np.asarray(value, dtype=np.float64)
    target = (n_paths,) + tuple(trailing)
    if arr.shape == target:
        return arr
    return np.broadcast_to(arr, target)


@dataclass(frozen=True)
class FBSDEProblem:
    name: str
    d: int
    n: int
    drift: CoeffFn
    diffusion: CoeffFn
    driver: CoeffFn
    terminal: TerminalFn
    x0: np.ndarray
    lipschitz: LipschitzData
    declared_class: ProblemClass
    markovian: bool = True
    terminal_markovian: bool = True
    driver_is_zero: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise UsageError("dimensions d, n must be >= 1")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if x0.shape != (self.d,):
            raise UsageError(f"x0 must have shape ({self.d},)")
        object.__setattr__(self, "x0", x0)

    def ignores(self, coeff: str) -> tuple:
        return CLASS_IGNORES[self.declared_class].get(coeff, ())


# ---------------------------------------------------------------------------
# condition checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmallTimeCheck:
    passed: bool
    margin: float
    product: float


def check_small_time_condition(lip: LipschitzData) -> SmallTimeCheck:
    """Local solvability condition K1 * |grad_z sigma| < 1 with its margin."""
    product = lip.K1 * lip.grad_z_sigma
    return SmallTimeCheck(passed=product < 1.0, margin=1.0 - product, product=product)


@dataclass
class ClassifyReport:
    declared: ProblemClass
    consistent: bool
    probes: int
    violations: list
    advisories: list
    sensitivities: dict


class ClassificationError(UsageError):
    def __init__(self, message, violations):
        super().__init__(message)
        self.violations = violations


def _probe_args(p: FBSDEProblem, rng: np.random.Generator, n_probe_steps: int = 6):
    """One random evaluation point: a short path prefix plus (y, z) pairs."""
    k = int(rng.integers(1, n_probe_steps + 1))
    x = np.cumsum(rng.standard_normal((1, k + 1, p.d)) * 0.5, axis=1)
    t = k * 0.1
    y = rng.standard_normal((1, p.n))
    z = rng.standard_normal((1, p.n, p.n))
    return t, x, y, z


def classify(p: FBSDEProblem, probe_budget: int = 32, seed: int = 0) -> ClassifyReport:
    """Validate the declared structural class by randomized sensitivity probes.

    Raises ClassificationError if any argument the declared class promises to
    ignore actually moves a coefficient by more than 1e-12. Adds an advisory
    when the probes are also consistent with a stricter class.
    """
    if probe_budget < 1:
        raise UsageError("probe_budget must be >= 1")
    rng = np.random.default_rng(seed)
    coeffs = {"b": p.drift, "sigma": p.diffusion}
    sensitive = {("b", "y"): False, ("b", "z"): False, ("sigma", "y"): False, ("sigma", "z"): False}
    violations = []
    for probe_idx in range(probe_budget):
        t, x, y, z = _probe_args(p, rng)
        y2 = y + rng.standard_normal(y.shape)
        z2 = z + rng.standard_normal(z.shape)
        for cname, fn in coeffs.items():
            base = np.asarray(fn(t, x, y, z), dtype=np.float64)
            diff_y = float(np.max(np.abs(np.asarray(fn(t, x, y2, z), dtype=np.float64) - base)))
            diff_z = float(np.max(np.abs(np.asarray(fn(t, x, y, z2), dtype=np.float64) - base)))
            if diff_y > 1e-12:
                sensitive[(cname, "y")] = True
            if diff_z > 1e-12:
                sensitive[(cname, "z")] = True
            for arg, diff in (("y", diff_y), ("z", diff_z)):
                if arg in p.ignores(cname) and diff > 1e-12:
                    violations.append(
                        {
                            "probe": probe_idx,
                            "coefficient": cname,
                            "argument": arg,
                            "delta": diff,
                        }
                    )
    if violations:
        raise ClassificationError(
            f"declared class {p.declared_class.value} inconsistent with probes: "
            f"{violations[0]['coefficient']} responds to {violations[0]['argument']} "
            f"(delta={violations[0]['delta']:.3e} on probe {violations[0]['probe']})",
            violations,
        )
    advisories = []
    for klass in _CLASS_ORDER:
        if klass is p.declared_class:
            break
        stricter_ok = all(
            not sensitive[(cname, arg)]
            for cname, args in CLASS_IGNORES[klass].items()
            for arg in args
        )
        if stricter_ok:
            advisories.append(
                f"probes are also consistent with the stricter class {klass.value}"
            )
            break
    return ClassifyReport(
        declared=p.declared_class,
        consistent=True,
        probes=probe_budget,
        violations=[],
        advisories=advisories,
        sensitivities={f"{c}_{a}": v for (c, a), v in sensitive.items()},
    )


@dataclass(frozen=True)
class MonotonicityReport:
    violations: int
    min_slack: float
    n_samples: int

    @property
    def clean(self) -> bool:
        return self.violations == 0 and self.n_samples > 0


def _difference_quotient_by(p, rng, t, x, z, sep_floor=1e-6):
    """Random member of the drift's y-difference-quotient matrix family (d, n)."""
    y1 = rng.standard_normal((1, p.n))
    y2 = y1 + rng.standard_normal((1, p.n))
    by = np.zeros((p.d, p.n))
    for k in range(p.n):
        hi = y2.copy()
        hi[0, :k] = y1[0, :k]
        lo = hi.copy()
        lo[0, k] = y1[0, k]
        dy = hi[0, k] - lo[0, k]
        if abs(dy) < sep_floor:
            hi[0, k] = lo[0, k] + sep_floor
            dy = sep_floor
        by[:, k] = (
            coeff_batch(p.drift(t, x, hi, z), 1, p.d)[0]
            - coeff_batch(p.drift(t, x, lo, z), 1, p.d)[0]
        ) / dy
    return by


def check_monotonicity_condition(
    p: FBSDEProblem, n_samples: int = 200, seed: int = 0, horizon: float = 1.0
) -> MonotonicityReport:
    """Monte Carlo spot-check of the drift-coupled monotonicity inequality.

    Draws random path/value pairs and random y-difference-quotient matrices of
    the drift, and evaluates (left side) - (right side) of the inequality.
    A clean report is evidence, not proof.
    """
    if p.declared_class is not ProblemClass.DRIFT_Y_SIGMA_X:
        raise UsageError("monotonicity check applies to the drift-y / sigma-x class only")
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    n_steps = 8
    dt = horizon / n_steps
    violations = 0
    min_slack = np.inf
    for _ in range(n_samples):
        xs = np.cumsum(rng.standard_normal((2, n_steps + 1, p.d)) * 0.5, axis=1)
        x1, x2 = xs[:1], xs[1:]
        k = int(rng.integers(1, n_steps + 1))
        t = k * dt
        y1 = rng.standard_normal((1, p.n))
        y2 = rng.standard_normal((1, p.n))
        z1 = rng.standard_normal((1, p.n, p.n))
        z2 = rng.standard_normal((1, p.n, p.n))
        by = _difference_quotient_by(p, rng, t, x1[:, : k + 1], z1)
        db = coeff_batch(p.drift(t, x1[:, : k + 1], y1, z1), 1, p.d)[0] - coeff_batch(
            p.drift(t, x2[:, : k + 1], y2, z2), 1, p.d
        )[0]
        df = coeff_batch(p.driver(t, x1[:, : k + 1], y1, z1), 1, p.n)[0] - coeff_batch(
            p.driver(t, x2[:, : k + 1], y2, z2), 1, p.n
        )[0]
        dsig = coeff_batch(p.diffusion(t, x1[:, : k + 1], y1, z1), 1, p.d, p.n)[0] - coeff_batch(
            p.diffusion(t, x2[:, : k + 1], y2, z2), 1, p.d, p.n
        )[0]
        dg = np.asarray(p.terminal(x1, dt))[0] - np.asarray(p.terminal(x2, dt))[0]
        dy = (y1 - y2)[0]
        dz = (z1 - z2)[0]
        dx_t = x1[0, k] - x2[0, k]
        dx_T = x1[0, -1] - x2[0, -1]
        lhs = float(db @ (by @ dy)) - float(df @ (by.T @ dx_t)) + float(
            np.sum(dsig * (by @ dz))
        )
        rhs = float(dg @ (by.T @ dx_T))
        slack = lhs - rhs
        min_slack = min(min_slack, slack)
        if slack < -1e-12:
            violations += 1
    return MonotonicityReport(violations=violations, min_slack=float(min_slack), n_samples=n_samples)


@dataclass(frozen=True)
class LipschitzProbeReport:
    worst_quotients: dict
    warnings: list


def probe_lipschitz(p: FBSDEProblem, n_samples: int = 200, seed: int = 0) -> LipschitzProbeReport:
    """Empirical difference quotients vs declared constants; warns above +1%."""
    from .path_space import TimeGrid, DiscretePath, path_distance_sq

    rng = np.random.default_rng(seed)
    n_steps = 8
    grid = TimeGrid(0.0, 1.0, n_steps)
    worst = {"b": 0.0, "sigma": 0.0, "f": 0.0, "g": 0.0}
    fns = {"b": p.drift, "sigma": p.diffusion, "f": p.driver}
    for _ in range(n_samples):
        xs = np.cumsum(rng.standard_normal((2, n_steps + 1, p.d)) * 0.5, axis=1)
        k = int(rng.integers(1, n_steps + 1))
        t = k * grid.dt
        y1, y2 = rng.standard_normal((2, 1, p.n))
        z1, z2 = rng.standard_normal((2, 1, p.n, p.n))
        p1 = DiscretePath(grid, xs[0])
        p2 = DiscretePath(grid, xs[1])
        dx_norm = np.sqrt(path_distance_sq(p1, p2, k))
        metric = dx_norm + np.linalg.norm(y1 - y2) + np.linalg.norm(z1 - z2)
        if metric < 1e-9:
            continue
        for name, fn in fns.items():
            shp = {"b": (p.d,), "sigma": (p.d, p.n), "f": (p.n,)}[name]
            d1 = coeff_batch(fn(t, xs[:1, : k + 1], y1, z1), 1, *shp)[0]
            d2 = coeff_batch(fn(t, xs[1:, : k + 1], y2, z2), 1, *shp)[0]
            worst[name] = max(worst[name], float(np.linalg.norm(d1 - d2)) / metric)
        dg_norm = np.sqrt(path_distance_sq(p1, p2, n_steps))
        if dg_norm > 1e-9:
            g1 = np.asarray(p.terminal(xs[:1], grid.dt))[0]
            g2 = np.asarray(p.terminal(xs[1:], grid.dt))[0]
            worst["g"] = max(worst["g"], float(np.linalg.norm(g1 - g2)) / dg_norm)
    warnings = []
    for name in ("b", "sigma", "f"):
        if worst[name] > p.lipschitz.K0 * 1.01 + 1e-15:
            warnings.append(f"empirical {name} quotient {worst[name]:.4g} exceeds declared K0 by >1%")
    if worst["g"] > p.lipschitz.K1 * 1.01 + 1e-15:
        warnings.append(f"empirical g quotient {worst['g']:.4g} exceeds declared K1 by >1%")
    return LipschitzProbeReport(worst_quotients=worst, warnings=warnings)


# ---------------------------------------------------------------------------
# built-in registry
# ---------------------------------------------------------------------------


def _zero_coeff(t, x, y, z):
    return 0.0


def _terminal_last(x, dt):
    return x[:, -1, :].copy()


def fromm_imkeller(x0: float = 1.0) -> FBSDEProblem:
    """dX = Y dt, dY = Z dW, Y_T = X_T. Closed form u(t,x) = x/(1-(T-t)) for T<1."""

    def drift(t, x, y, z):
        return y  # engines treat coefficient outputs as read-only

    return FBSDEProblem(
        name="fromm_imkeller",
        d=1,
        n=1,
        drift=drift,
        diffusion=_zero_coeff,
        driver=_zero_coeff,
        terminal=_terminal_last,
        x0=np.array([x0]),
        lipschitz=LipschitzData(
            K0=1.0,
            K1=1.0,
            grad_z_sigma=0.0,
            b=CoeffLipschitz(0.0, 1.0, 0.0),
            sigma=CoeffLipschitz(0.0, 0.0, 0.0),
            f=CoeffLipschitz(0.0, 0.0, 0.0),
        ),
        declared_class=ProblemClass.DRIFT_Y_SIGMA_X,
        driver_is_zero=True,
        params={"x0": x0},
    )


def delarue(k: float = 0.0, x0: float = 0.0) -> FBSDEProblem:
    """dX = (k + Z) dW, dY = Z dW, Y_T = X_T. K1 |grad_z sigma| = 1: no local solution."""

    def diffusion(t, x, y, z):
        return k + z

    return FBSDEProblem(
        name="delarue",
        d=1,
        n=1,
        drift=_zero_coeff,
        diffusion=diffusion,
        driver=_zero_coeff,
        terminal=_terminal_last,
        x0=np.array([x0]),
        lipschitz=LipschitzData(
            K0=1.0,
            K1=1.0,
            grad_z_sigma=1.0,
            b=CoeffLipschitz(0.0, 0.0, 0.0),
            sigma=CoeffLipschitz(0.0, 0.0, 1.0),
            f=CoeffLipschitz(0.0, 0.0, 0.0),
        ),
        declared_class=ProblemClass.GENERAL,
        driver_is_zero=True,
        params={"k": k, "x0": x0},
    )


def decoupled_brownian(x0: float = 0.0, f_shift: float = 0.0) -> FBSDEProblem:
    """dX = dW, f = f_shift (constant), Y_T = X_T: Y_t = X_t + f_shift (T - t)."""

    def diffusion(t, x, y, z):
        return 1.0

    def driver(t, x, y, z):
        return f_shift

    return FBSDEProblem(
        name="decoupled_brownian",
        d=1,
        n=1,
        drift=_zero_coeff,
        diffusion=diffusion,
        driver=driver,
        terminal=_terminal_last,
        x0=np.array([x0]),
        lipschitz=LipschitzData(
            K0=0.0,
            K1=1.0,
            grad_z_sigma=0.0,
            b=CoeffLipschitz(0.0, 0.0, 0.0),
            sigma=CoeffLipschitz(0.0, 0.0, 0.0),
            f=CoeffLipschitz(0.0, 0.0, 0.0),
        ),
        declared_class=ProblemClass.DECOUPLED,
        driver_is_zero=(f_shift == 0.0),
        params={"x0": x0, "f_shift": f_shift},
    )


def integral_terminal(x0: float = 0.0, T_hint: float = 1.0) -> FBSDEProblem:
    """dX = dW, f = 0, g(X) = X_T + int_0^T X ds (left-rectangle quadrature).

    Closed form: Y_t = (1 + T - t) X_t + int_0^t X ds, Z_t = 1 + T - t.
    K1 = sqrt(1 + T) is exact for horizon T = T_hint.
    """

    def diffusion(t, x, y, z):
        return 1.0

    def terminal(x, dt):
        return x[:, -1, :] + np.sum(x[:, :-1, :], axis=1) * dt

    return FBSDEProblem(
        name="integral_terminal",
        d=1,
        n=1,
        drift=_zero_coeff,
        diffusion=diffusion,
        driver=_zero_coeff,
        terminal=terminal,
        x0=np.array([x0]),
        lipschitz=LipschitzData(
            K0=0.0,
            K1=float(np.sqrt(1.0 + T_hint)),
            grad_z_sigma=0.0,
            b=CoeffLipschitz(0.0, 0.0, 0.0),
            sigma=CoeffLipschitz(0.0, 0.0, 0.0),
            f=CoeffLipschitz(0.0, 0.0, 0.0),
        ),
        declared_class=ProblemClass.DECOUPLED,
        terminal_markovian=False,
        markovian=True,
        driver_is_zero=True,
        params={"x0": x0, "T_hint": T_hint},
    )


REGISTRY = {
    "fromm_imkeller": fromm_imkeller,
    "delarue": delarue,
    "decoupled_brownian": decoupled_brownian,
    "integral_terminal": integral_terminal,
}


def make_problem(name: str, **params) -> FBSDEProblem:
    if name not in REGISTRY:
        raise UsageError(f"unknown problem {name!r}; registry: {sorted(REGISTRY)}")
    return REGISTRY[name](**params)


def with_driver_shift(p: FBSDEProblem, shift: float) -> FBSDEProblem:
    """Same problem with the driver shifted by a constant (per component)."""
    if shift == 0.0:
        return p
    base = p.driver

    def driver(t, x, y, z):
        return np.asarray(base(t, x, y, z)) + shift

    return replace(
        p,
        name=f"{p.name}+fshift",
        driver=driver,
        driver_is_zero=False,
        params={**p.params, "f_shift_extra": shift},
    )
