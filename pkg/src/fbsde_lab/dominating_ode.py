"""Characteristic-BSDE coefficients, worst-case bounds, and dominating ODEs.

The squared relative spread H of two backward solutions satisfies a BSDE with
driver F(h) = A h^2 + B h^{3/2} + C h + D h^{1/2} + F. A dominating ODE is a
deterministic dy/dt = -G(t, y) with F(.) <= G(t, .) pointwise; integrating it
backward from y_T = K1^2 yields the Lipschitz-bound schedule K_t = sqrt(y_t)
for the decoupling field, and its blow-up time bounds the feasible horizon.

Contraction-order conventions (dimensional consistency where the source
displays are ambiguous):
  * M := sigma_y . P (contract the y index) is a (d, n) matrix;
    S := sigma_x + Tr(sigma_z alpha) is (d, n).
  * beta always contracts the d index: the quadratic terms are
    -8 |M^T beta|^2 (in A), -16 (M^T beta).(S^T beta) (in B),
    -8 |sigma_x^T beta|^2 (in C).
  * D's first term is the scalar pairing 2 P^T f_x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import UsageError
from .problem import (
    FBSDEProblem,
    LipschitzData,
    MonotonicityReport,
    ProblemClass,
    coeff_batch,
)

BLOWUP_THRESHOLD = 1e8
ODE_GRID_STEPS = 10_000


# ---------------------------------------------------------------------------
# characteristic coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CharacteristicInputs:
    """Difference-quotient gradients and normalized state ratios.

    Shapes (d forward, n backward): b_x (d,), b_y (d,n), b_z (n,n,d),
    sigma_x (d,n), sigma_y (n,d,n) (leading index = y component),
    sigma_z (n,n,d,n), f_x (n,), f_y (n,n) (column k = quotient in y_k),
    f_z (n,n,n); alpha (n,n), beta (d,), P (n,) unit or zero, H >= 0.
    """

    b_x: np.ndarray
    b_y: np.ndarray
    b_z: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    sigma_z: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_z: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    P: np.ndarray
    H: float

    def __post_init__(self):
        arrays = {
            name: np.asarray(getattr(self, name), dtype=np.float64)
            for name in (
                "b_x", "b_y", "b_z", "sigma_x", "sigma_y", "sigma_z",
                "f_x", "f_y", "f_z", "alpha", "beta", "P",
            )
        }
        d = arrays["b_x"].shape[0]
        n = arrays["P"].shape[0]
        expected = {
            "b_x": (d,), "b_y": (d, n), "b_z": (n, n, d),
            "sigma_x": (d, n), "sigma_y": (n, d, n), "sigma_z": (n, n, d, n),
            "f_x": (n,), "f_y": (n, n), "f_z": (n, n, n),
            "alpha": (n, n), "beta": (d,), "P": (n,),
        }
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise UsageError(f"{name} has shape {arrays[name].shape}, expected {shape}")
            object.__setattr__(self, name, arrays[name])
        if self.H < 0:
            raise UsageError("H must be >= 0")
        p_norm = float(np.linalg.norm(self.P))
        if not (abs(p_norm - 1.0) <= 1e-9 or p_norm <= 1e-12):
            raise UsageError("P must be a unit vector or zero")
        if p_norm <= 1e-12 and self.H > 1e-12:
            raise UsageError("P = 0 requires H = 0 (vanishing Y-difference)")
        if float(np.linalg.norm(self.beta)) > 1.0 + 1e-9:
            raise UsageError("|beta| cannot exceed 1 (|X_t| <= path norm)")


@dataclass(frozen=True)
class CharacteristicCoefficients:
    A: float
    B: float
    C: float
    D: float
    F: float
    N: np.ndarray

    def driver(self, h: float) -> float:
        return (
            self.A * h * h
            + self.B * h**1.5
            + self.C * h
            + self.D * math.sqrt(h)
            + self.F
        )


def characteristic_coefficients(inp: CharacteristicInputs) -> CharacteristicCoefficients:
    """Evaluate the driver coefficients A, B, C, D, F and martingale row N."""
    m = np.tensordot(inp.P, inp.sigma_y, axes=(0, 0))  # (d, n)
    s = inp.sigma_x + np.tensordot(inp.alpha, inp.sigma_z, axes=([0, 1], [0, 1]))  # (d, n)
    mt_beta = m.T @ inp.beta  # (n,)
    st_beta = s.T @ inp.beta  # (n,)
    a = float(np.sum(m * m)) - 8.0 * float(mt_beta @ mt_beta)
    by_p = inp.b_y @ inp.P  # (d,)
    b = (
        2.0 * float(inp.beta @ by_p)
        + 2.0 * float(np.sum(m * s))
        - 16.0 * float(mt_beta @ st_beta)
    )
    tr_bz_alpha = np.tensordot(inp.alpha, inp.b_z, axes=([0, 1], [0, 1]))  # (d,)
    sx_beta = inp.sigma_x.T @ inp.beta  # (n,)
    c = (
        2.0 * float(inp.P @ (inp.f_y @ inp.P))
        + float(inp.beta @ inp.beta)
        + 2.0 * float(inp.beta @ (inp.b_x + tr_bz_alpha))
        + float(np.sum(inp.sigma_x * inp.sigma_x))
        - 8.0 * float(sx_beta @ sx_beta)
    )
    tr_fz_alpha = np.tensordot(inp.alpha, inp.f_z, axes=([0, 1], [0, 1]))  # (n,)
    d_coef = 2.0 * float(inp.P @ inp.f_x) + 2.0 * float(inp.P @ tr_fz_alpha)
    f_coef = -float(np.sum(inp.alpha * inp.alpha))
    sqrt_h = math.sqrt(inp.H)
    tr_sz_alpha = s - inp.sigma_x
    n_row = 2.0 * sqrt_h * (inp.P @ inp.alpha) - 2.0 * inp.H * (
        inp.beta @ (inp.sigma_x + sqrt_h * m + tr_sz_alpha)
    )
    return CharacteristicCoefficients(A=a, B=b, C=c, D=d_coef, F=f_coef, N=np.asarray(n_row))


# ---------------------------------------------------------------------------
# worst-case / empirical coefficient bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientBounds:
    """Upper bounds for the driver coefficients, alpha-linear parts absorbed.

    A_sup bounds A, B_sup bounds |B| (its alpha-free part), C_sup bounds C,
    D_sup bounds |D| (alpha-free part), F_sup bounds F (0 after absorbing
    -|alpha|^2). cubic_sup carries the h^3 remainder that appears only when
    sigma depends on both y and z (no quadratic pointwise dominator exists
    there). mode is 'worst_case' or 'empirical'.
    """

    A_sup: float
    B_sup: float
    C_sup: float
    D_sup: float
    F_sup: float
    cubic_sup: float = 0.0
    mode: str = "worst_case"
    details: dict = field(default_factory=dict)


def _ig(klass: ProblemClass, coeff: str):
    from .problem import CLASS_IGNORES

    return CLASS_IGNORES[klass].get(coeff, ())


def _class_flags(lip: LipschitzData, klass: ProblemClass):
    """Per-argument constants after zeroing what the structural class ignores."""
    tb, ts, tf = lip.table_b(), lip.table_sigma(), lip.table_f()
    by = 0.0 if "y" in _ig(klass, "b") else tb.y
    bz = 0.0 if "z" in _ig(klass, "b") else tb.z
    sy = 0.0 if "y" in _ig(klass, "sigma") else ts.y
    sz = 0.0 if "z" in _ig(klass, "sigma") else ts.z
    return tb.x, by, bz, ts.x, sy, sz, tf.x, tf.y, tf.z


def worst_case_bounds(lip: LipschitzData, d: int, n: int, klass: ProblemClass) -> CoefficientBounds:
    """Bound each coefficient display from the declared Lipschitz data.

    Uses |xi_x|, |xi_y|, |xi_z| <= their table constants, |beta| <= 1, |P| <= 1,
    and absorbs the alpha-linear parts against F = -|alpha|^2 by one joint
    completion of the square: L(h)|a| - a^2 <= L(h)^2/4 with
    L(h) = B1 h^{3/2} + C1 h + D1 h^{1/2}; the expansion's half powers are
    reduced by h^{3/2} <= (h^2+h)/2 and h^{5/2} <= (h^3+h^2)/2. F_sup is 0
    after absorption; remainders are credited to the other coefficients.
    """
    bx, by, bz, sx, sy, sz, fx, fy, fz = _class_flags(lip, klass)
    rn = math.sqrt(n)
    m_bound = rn * sy  # |sigma_y . P|_F
    a0 = n * sy * sy
    b0 = 2.0 * rn * by + 18.0 * m_bound * sx
    b1 = 18.0 * m_bound * (n * sz)
    c0 = 2.0 * rn * fy + 1.0 + 2.0 * bx + sx * sx
    c1 = 2.0 * n * bz
    d0 = 2.0 * fx
    d1 = 2.0 * n * fz
    # L(h)^2 / 4 expansion
    q3 = b1 * b1 / 4.0
    q52 = b1 * c1 / 2.0
    q2 = c1 * c1 / 4.0 + b1 * d1 / 2.0
    q32 = c1 * d1 / 2.0
    q1 = d1 * d1 / 4.0
    cubic = q3 + q52 / 2.0
    a_sup = a0 + q2 + q52 / 2.0 + q32 / 2.0
    c_sup = c0 + q1 + q32 / 2.0
    return CoefficientBounds(
        A_sup=a_sup,
        B_sup=b0,
        C_sup=c_sup,
        D_sup=d0,
        F_sup=0.0,
        cubic_sup=cubic,
        mode="worst_case",
        details={
            "alpha_linear": {"B1": b1, "C1": c1, "D1": d1},
            "pre_absorption": {"A0": a0, "B0": b0, "C0": c0, "D0": d0},
            "dims": {"d": d, "n": n},
            "class": klass.value,
        },
    )


def _telescoped_gradients(p: FBSDEProblem, t, x1, x2, y1, y2, z1, z2, dx_norm, sep=1e-7):
    """Difference-quotient gradients between two evaluation points.

    x first (at (y,z) of the first point), then y coordinates at the second
    path, then z entries; coincident coordinates use a one-sided bump (the
    liminf convention: never a 0/0 quotient).
    """
    d, n = p.d, p.n
    out = {}
    for name, fn, shape in (
        ("b", p.drift, (d,)),
        ("sigma", p.diffusion, (d, n)),
        ("f", p.driver, (n,)),
    ):
        gx = (
            coeff_batch(fn(t, x1, y1, z1), 1, *shape)[0]
            - coeff_batch(fn(t, x2, y1, z1), 1, *shape)[0]
        ) / dx_norm
        gy = np.zeros((n,) + shape)
        for k in range(n):
            hi = y1.copy()
            hi[0, :k] = y2[0, :k]
            lo = hi.copy()
            lo[0, k] = y2[0, k]
            dy = hi[0, k] - lo[0, k]
            if abs(dy) < sep:
                hi[0, k] = lo[0, k] + sep
                dy = sep
            gy[k] = (
                coeff_batch(fn(t, x2, hi, z1), 1, *shape)[0]
                - coeff_batch(fn(t, x2, lo, z1), 1, *shape)[0]
            ) / dy
        gz = np.zeros((n, n) + shape)
        for k in range(n):
            for l in range(n):
                hi = z1.copy()
                flat_idx = k * n + l
                hi.reshape(1, -1)[0, :flat_idx] = z2.reshape(1, -1)[0, :flat_idx]
                lo = hi.copy()
                lo[0, k, l] = z2[0, k, l]
                dz = hi[0, k, l] - lo[0, k, l]
                if abs(dz) < sep:
                    hi[0, k, l] = lo[0, k, l] + sep
                    dz = sep
                gz[k, l] = (
                    coeff_batch(fn(t, x2, y2, hi), 1, *shape)[0]
                    - coeff_batch(fn(t, x2, y2, lo), 1, *shape)[0]
                ) / dz
        out[name] = (gx, gy, gz)
    return out


@dataclass(frozen=True)
class EmpiricalSamplerConfig:
    n_paths: int = 256
    n_steps: int = 16
    n_pairs: int = 200
    t_loc: float = 0.05
    seed: int = 0


def empirical_bounds(
    p: FBSDEProblem, sampler: EmpiricalSamplerConfig | None = None
) -> CoefficientBounds:
    """Sample local solutions, evaluate the coefficient displays on path pairs,
    and return sample maxima (A, |B|, C, |D| slots; F stays <= 0)."""
    from .path_space import TimeGrid
    from .picard_solver import PicardConfig, local_solve, terminal_from_problem
    from .sde_engine import generate_brownian

    sampler = sampler or EmpiricalSamplerConfig()
    rng = np.random.default_rng(sampler.seed)
    grid = TimeGrid(0.0, sampler.t_loc, sampler.n_steps)
    noise = generate_brownian(grid, sampler.n_paths, sampler.seed + 1, dim=p.n)
    starts = p.x0[None, :] + 0.5 * (1.0 + np.abs(p.x0[None, :])) * rng.standard_normal(
        (sampler.n_paths, p.d)
    )
    sol = local_solve(
        p, starts, terminal_from_problem(p), grid, noise, PicardConfig()
    )
    xv, yv, zv = sol.ensemble.values, sol.backward.Y, sol.backward.Z
    a_max = b_max = c_max = d_max = f_max = 0.0
    got = 0
    for _ in range(sampler.n_pairs * 4):
        if got >= sampler.n_pairs:
            break
        i, j = rng.integers(0, sampler.n_paths, size=2)
        if i == j:
            continue
        k = int(rng.integers(1, sampler.n_steps))
        diff = xv[i : i + 1, : k + 1] - xv[j : j + 1, : k + 1]
        dsq = _kernels.prefix_sq_norms(diff, grid.dt)[0, k]
        dnorm = math.sqrt(max(dsq, 0.0))
        if dnorm < 1e-9:
            continue
        t = grid.t0 + k * grid.dt
        x1, x2 = xv[i : i + 1, : k + 1], xv[j : j + 1, : k + 1]
        y1, y2 = yv[i : i + 1, k], yv[j : j + 1, k]
        z1, z2 = zv[i : i + 1, min(k, zv.shape[1] - 1)], zv[j : j + 1, min(k, zv.shape[1] - 1)]
        grads = _telescoped_gradients(p, t, x1, x2, y1, y2, z1, z2, dnorm)
        dy_vec = (y1 - y2)[0]
        h = float(dy_vec @ dy_vec) / dsq
        p_vec = dy_vec / np.linalg.norm(dy_vec) if np.linalg.norm(dy_vec) > 1e-14 else np.zeros(p.n)
        if np.linalg.norm(dy_vec) <= 1e-14:
            h = 0.0
        alpha = (z1 - z2)[0] / dnorm
        beta = (x1[0, k] - x2[0, k]) / dnorm
        beta_norm = float(np.linalg.norm(beta))
        if beta_norm > 1.0:
            beta = beta / (beta_norm * (1.0 + 1e-12))
        bgx, bgy, bgz = grads["b"]
        sgx, sgy, sgz = grads["sigma"]
        fgx, fgy, fgz = grads["f"]
        inp = CharacteristicInputs(
            b_x=bgx,
            b_y=np.stack([bgy[k2] for k2 in range(p.n)], axis=1),
            b_z=bgz,
            sigma_x=sgx,
            sigma_y=sgy,
            sigma_z=sgz,
            f_x=fgx,
            f_y=np.stack([fgy[k2] for k2 in range(p.n)], axis=1),
            f_z=fgz,
            alpha=alpha,
            beta=beta,
            P=p_vec,
            H=h,
        )
        coeffs = characteristic_coefficients(inp)
        a_max = max(a_max, coeffs.A)
        b_max = max(b_max, abs(coeffs.B))
        c_max = max(c_max, coeffs.C)
        d_max = max(d_max, abs(coeffs.D))
        f_max = max(f_max, coeffs.F)
        got += 1
    return CoefficientBounds(
        A_sup=a_max,
        B_sup=b_max,
        C_sup=c_max,
        D_sup=d_max,
        F_sup=min(f_max, 0.0),
        cubic_sup=0.0,
        mode="empirical",
        details={"pairs": got},
    )


def coefficient_bounds(
    lip: LipschitzData,
    d: int,
    n: int,
    mode: str = "worst_case",
    klass: ProblemClass = ProblemClass.GENERAL,
    problem: FBSDEProblem | None = None,
    sampler: EmpiricalSamplerConfig | None = None,
) -> CoefficientBounds:
    if mode == "worst_case":
        return worst_case_bounds(lip, d, n, klass)
    if mode == "empirical":
        if problem is None:
            raise UsageError("empirical mode needs the problem to sample from")
        return empirical_bounds(problem, sampler)
    raise UsageError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# dominating ODE construction and backward integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DominatingODE:
    """dy/dt = -G(y) with G(y) = c0 + c1 y + c2 y^2 + c3 y^3, y(T) = y_terminal."""

    kind: str  # linear | affine_from_monotone | riccati
    c0: float
    c1: float
    c2: float
    y_terminal: float
    horizon: float
    c3: float = 0.0
    notes: tuple = ()

    def g(self, y: float) -> float:
        return self.c0 + y * (self.c1 + y * (self.c2 + y * self.c3))


def build_dominating_ode(
    klass: ProblemClass,
    bounds: CoefficientBounds,
    k1: float,
    horizon: float,
    monotonicity: MonotonicityReport | None = None,
) -> DominatingODE:
    """Assemble G from coefficient bounds via the half-power reductions
    |B| h^{3/2} <= |B|(h^2+h)/2 and |D| h^{1/2} <= |D|(h+1)/2."""
    y_t = k1 * k1
    notes = []
    if klass is ProblemClass.DECOUPLED:
        if abs(bounds.A_sup) > 1e-12 or abs(bounds.B_sup) > 1e-12:
            raise UsageError("decoupled problems must have A_sup = B_sup = 0")
        return DominatingODE(
            kind="linear",
            c0=bounds.F_sup + bounds.D_sup / 2.0,
            c1=bounds.C_sup + bounds.D_sup / 2.0,
            c2=0.0,
            y_terminal=y_t,
            horizon=horizon,
        )
    if klass is ProblemClass.DRIFT_Y_SIGMA_X:
        if monotonicity is not None and monotonicity.clean:
            if abs(bounds.A_sup) > 1e-12:
                raise UsageError("drift-y/sigma-x class must have A_sup = 0")
            return DominatingODE(
                kind="affine_from_monotone",
                c0=bounds.F_sup + bounds.D_sup / 2.0,
                c1=bounds.C_sup + bounds.D_sup / 2.0,
                c2=0.0,
                y_terminal=y_t,
                horizon=horizon,
            )
        notes.append(
            "monotonicity condition not certified; B-terms kept, falling back to riccati"
        )
    return DominatingODE(
        kind="riccati",
        c0=bounds.F_sup + bounds.D_sup / 2.0,
        c1=bounds.C_sup + bounds.B_sup / 2.0 + bounds.D_sup / 2.0,
        c2=bounds.A_sup + bounds.B_sup / 2.0,
        c3=bounds.cubic_sup,
        y_terminal=y_t,
        horizon=horizon,
        notes=tuple(notes),
    )


@dataclass
class ODESolution:
    """Backward trajectory on an ascending time grid, with explosion diagnostics."""

    times: np.ndarray
    y: np.ndarray
    exploded: bool
    t_max: float | None
    ode: DominatingODE

    def k_schedule(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.y, 0.0))

    def k_at(self, t: float) -> float:
        """Lipschitz-bound schedule K_t = sqrt(y_t); +inf at or below the blow-up time."""
        if self.exploded and self.t_max is not None and t <= self.t_max:
            return math.inf
        vals = self.y
        finite = np.isfinite(vals)
        if not finite.all():
            first = int(np.argmax(finite))
            if t < self.times[first]:
                return math.inf
            return math.sqrt(max(float(np.interp(t, self.times[first:], vals[first:])), 0.0))
        return math.sqrt(max(float(np.interp(t, self.times, vals)), 0.0))

    def k_max(self, up_to: float | None = None) -> float:
        if self.exploded:
            return math.inf
        if up_to is None:
            return float(np.sqrt(np.max(self.y)))
        mask = self.times <= up_to + 1e-12
        return float(np.sqrt(np.max(self.y[mask]))) if mask.any() else float("nan")


def integrate_backward(
    ode: DominatingODE,
    dt_ode: float | None = None,
    blowup_threshold: float = BLOWUP_THRESHOLD,
) -> ODESolution:
    """RK4 from y(T) = y_terminal down to t = 0, with blow-up detection.

    Substeps shrink automatically near the explosion so t_max (the largest time
    where y crosses the threshold) is located far more precisely than dt_ode.
    """
    if dt_ode is not None and dt_ode <= 0:
        raise UsageError("dt_ode must be positive")
    n_grid = ODE_GRID_STEPS if dt_ode is None else max(int(round(ode.horizon / dt_ode)), 1)
    y_vals, exploded, t_max = _kernels.rk4_backward(
        (ode.c0, ode.c1, ode.c2, ode.c3), ode.y_terminal, ode.horizon, n_grid, blowup_threshold
    )
    times = np.linspace(0.0, ode.horizon, n_grid + 1)
    return ODESolution(
        times=times,
        y=np.asarray(y_vals),
        exploded=bool(exploded),
        t_max=float(t_max) if exploded else None,
        ode=ode,
    )


@dataclass
class TMaxReport:
    t_max: float | None
    schedule: ODESolution
    ode: DominatingODE
    bounds: CoefficientBounds


def t_max_for_lipschitz(
    lip: LipschitzData,
    d: int,
    n: int,
    t_query: float,
    klass: ProblemClass = ProblemClass.GENERAL,
    monotonicity: MonotonicityReport | None = None,
    dt_ode: float | None = None,
    blowup_threshold: float = BLOWUP_THRESHOLD,
) -> TMaxReport:
    """Worst-case bounds -> dominating ODE -> backward integration over [0, t_query]."""
    bounds = worst_case_bounds(lip, d, n, klass)
    ode = build_dominating_ode(klass, bounds, lip.K1, t_query, monotonicity)
    schedule = integrate_backward(ode, dt_ode=dt_ode, blowup_threshold=blowup_threshold)
    return TMaxReport(t_max=schedule.t_max, schedule=schedule, ode=ode, bounds=bounds)
