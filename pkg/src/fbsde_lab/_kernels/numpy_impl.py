"""Pure-numpy reference implementations of the hot kernels.

These are the fallback backend (FBSDE_LAB_NUMBA=0) and the semantic
reference for the numba twins in ``numba_impl``: same algorithm, same
control flow, so the two backends agree to floating-point reordering.
"""

from __future__ import annotations

import numpy as np

BASIS_MARKOV = 0
BASIS_PATH = 1

RIDGE_REL_DEFAULT = 1e-8
_RIDGE_ABS_REL = 1e-12  # conditioning floor relative to trace(X'X)
_EXPLODE_SAFETY = 0.05  # max relative growth per RK4 substep near blow-up


def n_features(basis_kind: int, degree: int) -> int:
    if basis_kind == BASIS_MARKOV:
        return degree + 1
    # monomials in (x, i) up to total degree
    return (degree + 1) * (degree + 2) // 2


def prefix_sq_norms(values: np.ndarray, dt: float) -> np.ndarray:
    """Running squared path norm per path and grid index, left-rectangle quadrature.

    values: (n_paths, n_points, d) -> (n_paths, n_points)
    """
    sq = np.einsum("pjd,pjd->pj", values, values)
    run = np.empty_like(sq)
    run[:, 0] = 0.0
    np.cumsum(sq[:, :-1] * dt, axis=1, out=run[:, 1:])
    return run + sq


def _features_1d(x: np.ndarray, integ: np.ndarray, basis_kind: int, degree: int) -> np.ndarray:
    p = x.shape[0]
    f = n_features(basis_kind, degree)
    out = np.empty((p, f))
    out[:, 0] = 1.0
    if basis_kind == BASIS_MARKOV:
        for j in range(1, degree + 1):
            out[:, j] = out[:, j - 1] * x
    else:
        col = 1
        for total in range(1, degree + 1):
            for ix in range(total, -1, -1):
                out[:, col] = (x**ix) * (integ ** (total - ix))
                col += 1
    return out


def _chol_solve(a: np.ndarray, b: np.ndarray):
    """Cholesky solve for a small SPD system; returns (x, ok)."""
    f = a.shape[0]
    l = np.zeros((f, f))
    for i in range(f):
        s = a[i, i]
        for k in range(i):
            s -= l[i, k] * l[i, k]
        if not s > 0.0:
            return np.zeros_like(b), False
        l[i, i] = np.sqrt(s)
        for j in range(i + 1, f):
            s = a[j, i]
            for k in range(i):
                s -= l[j, k] * l[i, k]
            l[j, i] = s / l[i, i]
    ncols = b.shape[1]
    x = np.zeros((f, ncols))
    for c in range(ncols):
        # forward then backward substitution
        y = np.zeros(f)
        for i in range(f):
            s = b[i, c]
            for k in range(i):
                s -= l[i, k] * y[k]
            y[i] = s / l[i, i]
        for i in range(f - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, f):
                s -= l[k, i] * x[k, c]
            x[i, c] = s / l[i, i]
    if not np.all(np.isfinite(x)):
        return x, False
    return x, True


def _fit_from_normal(g: np.ndarray, u: np.ndarray, p: int, ridge_user: float, ridge_rel: float):
    """Ridge solve (g + lam I) coef = u for a normal system g = X'X, u = X'rhs.

    ridge_user < 0 means automatic: scale-free covariance-trace rule with a
    conditioning floor relative to trace(X'X), plus escalation retries. An
    explicit user lambda (including 0) is honored literally, so a
    rank-deficient fit with ridge 0 fails and surfaces as an error upstream.
    Feature 0 is assumed to be the intercept, so g[0]/p is the feature mean.
    """
    f = g.shape[0]
    trace_g = float(np.trace(g))
    mean_f = g[0] / p
    trace_cov = trace_g / p - float(mean_f @ mean_f)
    if ridge_user >= 0.0:
        lam = ridge_user
        attempts = 1
    else:
        lam = max(ridge_rel * max(trace_cov, 0.0) / f, _RIDGE_ABS_REL * trace_g / f)
        attempts = 4
    eye = np.eye(f)
    coef = np.zeros_like(u)
    for _ in range(attempts):
        coef, ok = _chol_solve(g + lam * eye, u)
        if ok:
            return coef, lam, True
        lam = lam * 100.0 + _RIDGE_ABS_REL * trace_g / f
    return coef, lam, False


def backward_sweep_1d_tm(
    x_tm: np.ndarray,
    i_tm: np.ndarray,
    dw_tm: np.ndarray,
    dt: float,
    y_terminal: np.ndarray,
    basis_kind: int,
    degree: int,
    ridge_user: float,
    ridge_rel: float,
    center_z: bool,
    y_old_tm: np.ndarray,
    z_old_tm: np.ndarray,
    with_residual: bool,
    y_out: np.ndarray,
    z_out: np.ndarray,
):
    """Time-major backward sweep writing into caller-provided y_out, z_out.

    x_tm (S+1, P), dw_tm (S, P); arrays may be float32 (regression algebra is
    float64). Returns coefficient tables, lambdas, the residual pieces
    a_k = mean(y_k - y_old_k)^2 and b_k = mean(z_k - z_old_k)^2, and a status
    (-1 ok, else the failing step index).
    """
    s1, p = x_tm.shape
    s = s1 - 1
    f = n_features(basis_kind, degree)
    ycoef = np.zeros((s, f))
    zcoef = np.zeros((s, f))
    lambdas = np.zeros(s)
    a_res = np.zeros(s1)
    b_res = np.zeros(s)
    y_out[s] = y_terminal
    if with_residual:
        diff = y_out[s].astype(np.float64) - y_old_tm[s].astype(np.float64)
        a_res[s] = float(np.mean(diff**2))
    for k in range(s - 1, -1, -1):
        feats = _features_1d(
            x_tm[k].astype(np.float64), i_tm[k].astype(np.float64), basis_kind, degree
        )
        g = feats.T @ feats
        ynext = y_out[k + 1].astype(np.float64)
        cy, lam, ok = _fit_from_normal(g, feats.T @ ynext[:, None], p, ridge_user, ridge_rel)
        if not ok:
            return ycoef, zcoef, lambdas, a_res, b_res, k
        cont = feats @ cy[:, 0]
        resid = ynext - cont if center_z else ynext
        target_z = resid * dw_tm[k].astype(np.float64) / dt
        cz, _, ok = _fit_from_normal(g, feats.T @ target_z[:, None], p, ridge_user, ridge_rel)
        if not ok:
            return ycoef, zcoef, lambdas, a_res, b_res, k
        y_out[k] = cont
        zfit = feats @ cz[:, 0]
        z_out[k] = zfit
        if with_residual:
            a_res[k] = float(np.mean((cont - y_old_tm[k].astype(np.float64)) ** 2))
            b_res[k] = float(np.mean((zfit - z_old_tm[k].astype(np.float64)) ** 2))
        ycoef[k] = cy[:, 0]
        zcoef[k] = cz[:, 0]
        lambdas[k] = lam
    return ycoef, zcoef, lambdas, a_res, b_res, -1


def backward_sweep_1d(
    x: np.ndarray,
    integ: np.ndarray,
    dw: np.ndarray,
    dt: float,
    y_terminal: np.ndarray,
    basis_kind: int,
    degree: int,
    ridge_user: float,
    ridge_rel: float,
    center_z: bool,
):
    """Driverless d=n=1 backward induction with per-step ridge regressions.

    x, integ: (P, S+1); dw: (P, S); y_terminal: (P,).
    Returns (y (P,S+1), z (P,S), ycoef (S,F), zcoef (S,F), lambdas (S,), status).
    status is -1 on success, else the failing step index.
    """
    x_tm = np.ascontiguousarray(x.T)
    s1, p = x_tm.shape
    y_tm = np.empty((s1, p))
    z_tm = np.empty((s1 - 1, p))
    dummy = np.zeros((1, 1))
    ycoef, zcoef, lambdas, _, _, status = backward_sweep_1d_tm(
        x_tm,
        np.ascontiguousarray(integ.T),
        np.ascontiguousarray(dw.T),
        dt,
        np.ascontiguousarray(y_terminal),
        basis_kind,
        degree,
        ridge_user,
        ridge_rel,
        center_z,
        dummy,
        dummy,
        False,
        y_tm,
        z_tm,
    )
    return (
        np.ascontiguousarray(y_tm.T),
        np.ascontiguousarray(z_tm.T),
        ycoef,
        zcoef,
        lambdas,
        status,
    )


def interval_stats_tm(x_tm: np.ndarray, y_tm: np.ndarray, z_tm: np.ndarray):
    """Per-row moments: x mean-square, y mean and mean-square, z mean |.| and
    mean-square (row = grid point of the time-major arrays)."""
    p = x_tm.shape[1]
    x64 = x_tm.astype(np.float64, copy=False)
    y64 = y_tm.astype(np.float64, copy=False)
    z64 = z_tm.astype(np.float64, copy=False)
    x_m2 = np.einsum("kp,kp->k", x64, x64) / p
    y_m1 = y64.mean(axis=1)
    y_m2 = np.einsum("kp,kp->k", y64, y64) / p
    z_abs = np.abs(z64).mean(axis=1)
    z_m2 = np.einsum("kp,kp->k", z64, z64) / p
    return x_m2, y_m1, y_m2, z_abs, z_m2


def rk4_backward(
    c0: float,
    c1: float,
    c2: float,
    c3: float,
    y_terminal: float,
    horizon: float,
    n_grid: int,
    blowup_threshold: float,
):
    """Integrate dy/dt = -G(y), G(y)=c0+c1 y+c2 y^2+c3 y^3, from t=horizon back to 0.

    Classic RK4 on a uniform grid, with substep shrinking near blow-up so the
    threshold-crossing time is located to far better than one grid step.
    Returns (y ascending in t, exploded, t_max); y is +inf for t < t_max.
    """
    m = n_grid
    h0 = horizon / m
    y_vals = np.full(m + 1, np.inf)
    y_vals[m] = y_terminal
    y = y_terminal
    exploded = False
    t_max = np.nan
    for j in range(m - 1, -1, -1):
        # integrate one grid step backward in t (forward in s = horizon - t)
        remaining = h0
        guard = 0
        while remaining > 0.0:
            g = c0 + y * (c1 + y * (c2 + y * c3))
            scale = max(abs(y), 1.0)
            gmag = abs(g)
            h = remaining
            if gmag * h > _EXPLODE_SAFETY * scale:
                h = _EXPLODE_SAFETY * scale / gmag
            k1 = g
            y2 = y + 0.5 * h * k1
            k2 = c0 + y2 * (c1 + y2 * (c2 + y2 * c3))
            y3 = y + 0.5 * h * k2
            k3 = c0 + y3 * (c1 + y3 * (c2 + y3 * c3))
            y4 = y + h * k3
            k4 = c0 + y4 * (c1 + y4 * (c2 + y4 * c3))
            y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            remaining -= h
            y = y_new
            if not np.isfinite(y) or y > blowup_threshold:
                exploded = True
                t_max = (j + 1) * h0 - (h0 - remaining)
                return y_vals, True, t_max
            guard += 1
            if guard > 1_000_000:
                exploded = True
                t_max = (j + 1) * h0 - (h0 - remaining)
                return y_vals, True, t_max
        y_vals[j] = y
    return y_vals, exploded, t_max
