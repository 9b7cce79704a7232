"""Numba-jitted twins of the numpy kernels.

Same algorithms and results as ``numpy_impl`` up to floating-point
reassociation: reductions over paths accumulate per fixed-size chunk in
float64 (inputs may be float32) and the chunk partials combine in index
order, so results are bit-stable for any thread count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .numpy_impl import BASIS_MARKOV, BASIS_PATH  # noqa: F401

_CHUNK = 16384
_RIDGE_ABS_REL = 1e-12
_EXPLODE_SAFETY = 0.05


@njit(cache=True, inline="always")
def _n_features(basis_kind, degree):
    if basis_kind == 0:  # markov
        return degree + 1
    return (degree + 1) * (degree + 2) // 2


@njit(cache=True)
def _chol_solve(a, b):
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
    y = np.zeros(f)
    for c in range(ncols):
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
    ok = True
    for i in range(f):
        for c in range(ncols):
            if not np.isfinite(x[i, c]):
                ok = False
    return x, ok


@njit(cache=True)
def _fit_from_normal(g, u, f, p, ridge_user, ridge_rel):
    trace_g = 0.0
    for a in range(f):
        trace_g += g[a, a]
    # feature 0 is the intercept, so row 0 of g over p is the feature mean
    mean_sq = 0.0
    for a in range(f):
        mean_sq += (g[0, a] / p) * (g[0, a] / p)
    trace_cov = trace_g / p - mean_sq
    if ridge_user >= 0.0:
        lam = ridge_user
        attempts = 1
    else:
        lam0 = ridge_rel * max(trace_cov, 0.0) / f
        lam = max(lam0, _RIDGE_ABS_REL * trace_g / f)
        attempts = 4
    coef = np.zeros((f, 1))
    for _ in range(attempts):
        a_mat = g.copy()
        for a in range(f):
            a_mat[a, a] += lam
        coef, ok = _chol_solve(a_mat, u)
        if ok:
            return coef, lam, True
        lam = lam * 100.0 + _RIDGE_ABS_REL * trace_g / f
    return coef, lam, False


@njit(cache=True, inline="always")
def _fill_features(xv, iv, basis_kind, degree, out):
    out[0] = 1.0
    if basis_kind == 0:
        for j in range(1, degree + 1):
            out[j] = out[j - 1] * xv
    else:
        col = 1
        for total in range(1, degree + 1):
            for ix in range(total, -1, -1):
                v = 1.0
                for _ in range(ix):
                    v *= xv
                for _ in range(total - ix):
                    v *= iv
                out[col] = v
                col += 1


@njit(cache=True, parallel=True)
def _accumulate_gu(x_k, i_k, target, basis_kind, degree, f):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    gpart = np.zeros((nchunks, f, f))
    upart = np.zeros((nchunks, f))
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        feats = np.empty(f)
        gloc = np.zeros((f, f))
        uloc = np.zeros(f)
        for idx in range(lo, hi):
            _fill_features(np.float64(x_k[idx]), np.float64(i_k[idx]), basis_kind, degree, feats)
            t = np.float64(target[idx])
            for a in range(f):
                fa = feats[a]
                uloc[a] += fa * t
                row = gloc[a]
                for b in range(a, f):
                    row[b] += fa * feats[b]
        gpart[c] = gloc
        upart[c] = uloc
    g = np.zeros((f, f))
    u = np.zeros((f, 1))
    for c in range(nchunks):
        for a in range(f):
            u[a, 0] += upart[c, a]
            for b in range(a, f):
                g[a, b] += gpart[c, a, b]
    for a in range(f):
        for b in range(a):
            g[a, b] = g[b, a]
    return g, u


@njit(cache=True, parallel=True)
def _generic_cont_ztarget(
    x_k, i_k, ynext, dw_k, dt, cy, basis_kind, degree, f, center_z, y_old_k, cont, with_res
):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    upart = np.zeros((nchunks, f))
    apart = np.zeros(nchunks)
    inv_dt = 1.0 / dt
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        feats = np.empty(f)
        uloc = np.zeros(f)
        aloc = 0.0
        for idx in range(lo, hi):
            _fill_features(np.float64(x_k[idx]), np.float64(i_k[idx]), basis_kind, degree, feats)
            s = 0.0
            for a in range(f):
                s += feats[a] * cy[a, 0]
            cont[idx] = s
            yn = np.float64(ynext[idx])
            if center_z:
                tz = (yn - s) * np.float64(dw_k[idx]) * inv_dt
            else:
                tz = yn * np.float64(dw_k[idx]) * inv_dt
            for a in range(f):
                uloc[a] += feats[a] * tz
            if with_res:
                d = s - np.float64(y_old_k[idx])
                aloc += d * d
        upart[c] = uloc
        apart[c] = aloc
    u = np.zeros((f, 1))
    a_sum = 0.0
    for c in range(nchunks):
        a_sum += apart[c]
        for a in range(f):
            u[a, 0] += upart[c, a]
    return u, a_sum / p


@njit(cache=True, parallel=True)
def _generic_predict_z(x_k, i_k, cz, basis_kind, degree, f, z_old_k, out, with_res):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    bpart = np.zeros(nchunks)
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        feats = np.empty(f)
        bloc = 0.0
        for idx in range(lo, hi):
            _fill_features(np.float64(x_k[idx]), np.float64(i_k[idx]), basis_kind, degree, feats)
            s = 0.0
            for a in range(f):
                s += feats[a] * cz[a, 0]
            out[idx] = s
            if with_res:
                d = s - np.float64(z_old_k[idx])
                bloc += d * d
        bpart[c] = bloc
    b_sum = 0.0
    for c in range(nchunks):
        b_sum += bpart[c]
    return b_sum / p


# ---------------------------------------------------------------------------
# fused fast paths for the default bases (d = 1): power-sum normal equations.
# Inputs may be float32; every product is computed in float64.
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True, fastmath=True)
def _sums_markov2(x_k, target):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros((nchunks, 8))
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        s1 = s2 = s3 = s4 = t0 = t1 = t2 = 0.0
        for idx in range(lo, hi):
            xv = np.float64(x_k[idx])
            x2 = xv * xv
            t = np.float64(target[idx])
            s1 += xv
            s2 += x2
            s3 += x2 * xv
            s4 += x2 * x2
            t0 += t
            t1 += xv * t
            t2 += x2 * t
        part[c, 0] = hi - lo
        part[c, 1] = s1
        part[c, 2] = s2
        part[c, 3] = s3
        part[c, 4] = s4
        part[c, 5] = t0
        part[c, 6] = t1
        part[c, 7] = t2
    tot = np.zeros(8)
    for c in range(nchunks):
        for j in range(8):
            tot[j] += part[c, j]
    g = np.empty((3, 3))
    g[0, 0] = tot[0]
    g[0, 1] = g[1, 0] = tot[1]
    g[0, 2] = g[1, 1] = g[2, 0] = tot[2]
    g[1, 2] = g[2, 1] = tot[3]
    g[2, 2] = tot[4]
    u = np.empty((3, 1))
    u[0, 0] = tot[5]
    u[1, 0] = tot[6]
    u[2, 0] = tot[7]
    return g, u


@njit(cache=True, parallel=True, fastmath=True)
def _cont_ztarget_markov2(x_k, ynext, dw_k, dt, cy0, cy1, cy2, center_z, y_old_k, cont_out, with_res):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros((nchunks, 4))
    inv_dt = 1.0 / dt
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        t0 = t1 = t2 = aloc = 0.0
        for idx in range(lo, hi):
            xv = np.float64(x_k[idx])
            x2 = xv * xv
            cont = cy0 + cy1 * xv + cy2 * x2
            cont_out[idx] = cont
            yn = np.float64(ynext[idx])
            if center_z:
                tz = (yn - cont) * np.float64(dw_k[idx]) * inv_dt
            else:
                tz = yn * np.float64(dw_k[idx]) * inv_dt
            t0 += tz
            t1 += xv * tz
            t2 += x2 * tz
            if with_res:
                d = cont - np.float64(y_old_k[idx])
                aloc += d * d
        part[c, 0] = t0
        part[c, 1] = t1
        part[c, 2] = t2
        part[c, 3] = aloc
    u = np.zeros((3, 1))
    a_sum = 0.0
    for c in range(nchunks):
        u[0, 0] += part[c, 0]
        u[1, 0] += part[c, 1]
        u[2, 0] += part[c, 2]
        a_sum += part[c, 3]
    return u, a_sum / p


@njit(cache=True, parallel=True, fastmath=True)
def _predict_z_markov2(x_k, c0, c1, c2, z_old_k, out, with_res):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros(nchunks)
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        bloc = 0.0
        for idx in range(lo, hi):
            xv = np.float64(x_k[idx])
            s = c0 + c1 * xv + c2 * xv * xv
            out[idx] = s
            if with_res:
                d = s - np.float64(z_old_k[idx])
                bloc += d * d
        part[c] = bloc
    b_sum = 0.0
    for c in range(nchunks):
        b_sum += part[c]
    return b_sum / p


@njit(cache=True, parallel=True, fastmath=True)
def _sums_path2(x_k, i_k, target):
    # features (1, x, i, x^2, x i, i^2): mixed power sums up to total degree 4
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros((nchunks, 21))
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        acc = np.zeros(21)
        for idx in range(lo, hi):
            xv = np.float64(x_k[idx])
            iv = np.float64(i_k[idx])
            t = np.float64(target[idx])
            x2 = xv * xv
            i2 = iv * iv
            xi = xv * iv
            acc[0] += xv
            acc[1] += iv
            acc[2] += x2
            acc[3] += xi
            acc[4] += i2
            acc[5] += x2 * xv
            acc[6] += x2 * iv
            acc[7] += xv * i2
            acc[8] += i2 * iv
            acc[9] += x2 * x2
            acc[10] += x2 * xi
            acc[11] += x2 * i2
            acc[12] += xi * i2
            acc[13] += i2 * i2
            acc[14] += t
            acc[15] += xv * t
            acc[16] += iv * t
            acc[17] += x2 * t
            acc[18] += xi * t
            acc[19] += i2 * t
            acc[20] += 1.0
        part[c] = acc
    tot = np.zeros(21)
    for c in range(nchunks):
        for j in range(21):
            tot[j] += part[c, j]
    mom = np.zeros((5, 5))
    mom[0, 0] = tot[20]
    mom[1, 0] = tot[0]
    mom[0, 1] = tot[1]
    mom[2, 0] = tot[2]
    mom[1, 1] = tot[3]
    mom[0, 2] = tot[4]
    mom[3, 0] = tot[5]
    mom[2, 1] = tot[6]
    mom[1, 2] = tot[7]
    mom[0, 3] = tot[8]
    mom[4, 0] = tot[9]
    mom[3, 1] = tot[10]
    mom[2, 2] = tot[11]
    mom[1, 3] = tot[12]
    mom[0, 4] = tot[13]
    ex = np.array([0, 1, 0, 2, 1, 0])
    ei = np.array([0, 0, 1, 0, 1, 2])
    g = np.empty((6, 6))
    for a in range(6):
        for b in range(6):
            g[a, b] = mom[ex[a] + ex[b], ei[a] + ei[b]]
    u = np.empty((6, 1))
    u[0, 0] = tot[14]
    u[1, 0] = tot[15]
    u[2, 0] = tot[16]
    u[3, 0] = tot[17]
    u[4, 0] = tot[18]
    u[5, 0] = tot[19]
    return g, u


@njit(cache=True, parallel=True, fastmath=True)
def _cont_ztarget_path2(x_k, i_k, ynext, dw_k, dt, cy, center_z, y_old_k, cont_out, with_res):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros((nchunks, 7))
    inv_dt = 1.0 / dt
    c0, c1, c2, c3, c4, c5 = cy[0, 0], cy[1, 0], cy[2, 0], cy[3, 0], cy[4, 0], cy[5, 0]
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        acc = np.zeros(7)
        for idx in range(lo, hi):
            xv = np.float64(x_k[idx])
            iv = np.float64(i_k[idx])
            x2 = xv * xv
            i2 = iv * iv
            xi = xv * iv
            cont = c0 + c1 * xv + c2 * iv + c3 * x2 + c4 * xi + c5 * i2
            cont_out[idx] = cont
            yn = np.float64(ynext[idx])
            if center_z:
                tz = (yn - cont) * np.float64(dw_k[idx]) * inv_dt
            else:
                tz = yn * np.float64(dw_k[idx]) * inv_dt
            acc[0] += tz
            acc[1] += xv * tz
            acc[2] += iv * tz
            acc[3] += x2 * tz
            acc[4] += xi * tz
            acc[5] += i2 * tz
            if with_res:
                dd = cont - np.float64(y_old_k[idx])
                acc[6] += dd * dd
        part[c] = acc
    u = np.zeros((6, 1))
    a_sum = 0.0
    for c in range(nchunks):
        for j in range(6):
            u[j, 0] += part[c, j]
        a_sum += part[c, 6]
    return u, a_sum / p


@njit(cache=True, parallel=True, fastmath=True)
def _predict_z_path2(x_k, i_k, cz, z_old_k, out, with_res):
    p = x_k.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros(nchunks)
    c0, c1, c2, c3, c4, c5 = cz[0, 0], cz[1, 0], cz[2, 0], cz[3, 0], cz[4, 0], cz[5, 0]
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        bloc = 0.0
        for idx in range(lo, hi):
            xv = np.float64(x_k[idx])
            iv = np.float64(i_k[idx])
            s = c0 + c1 * xv + c2 * iv + c3 * xv * xv + c4 * xv * iv + c5 * iv * iv
            out[idx] = s
            if with_res:
                d = s - np.float64(z_old_k[idx])
                bloc += d * d
        part[c] = bloc
    b_sum = 0.0
    for c in range(nchunks):
        b_sum += part[c]
    return b_sum / p


@njit(cache=True, parallel=True, fastmath=True)
def _sq_diff_mean(a, b):
    p = a.shape[0]
    nchunks = (p + _CHUNK - 1) // _CHUNK
    part = np.zeros(nchunks)
    for c in prange(nchunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, p)
        s = 0.0
        for idx in range(lo, hi):
            d = np.float64(a[idx]) - np.float64(b[idx])
            s += d * d
        part[c] = s
    tot = 0.0
    for c in range(nchunks):
        tot += part[c]
    return tot / p


@njit(cache=True)
def backward_sweep_1d_tm(
    x_tm,
    i_tm,
    dw_tm,
    dt,
    y_terminal,
    basis_kind,
    degree,
    ridge_user,
    ridge_rel,
    center_z,
    y_old_tm,
    z_old_tm,
    with_residual,
    y_out,
    z_out,
):
    """Time-major backward sweep writing into caller-provided y_out, z_out.

    x_tm (S+1, P), dw_tm (S, P); arrays may be float32 (accumulation is
    float64). Returns coefficient tables, lambdas, the residual pieces
    a_k = mean(y_k - y_old_k)^2 and b_k = mean(z_k - z_old_k)^2, and a
    status (-1 ok, else the failing step index).
    """
    s1, p = x_tm.shape
    s = s1 - 1
    f = _n_features(basis_kind, degree)
    ycoef = np.zeros((s, f))
    zcoef = np.zeros((s, f))
    lambdas = np.zeros(s)
    a_res = np.zeros(s1)
    b_res = np.zeros(s)
    y_out[s] = y_terminal
    if with_residual:
        a_res[s] = _sq_diff_mean(y_out[s], y_old_tm[s])
    fast_markov2 = basis_kind == 0 and degree == 2
    fast_path2 = basis_kind == 1 and degree == 2
    for k in range(s - 1, -1, -1):
        x_k = x_tm[k]
        i_k = i_tm[k]
        dw_k = dw_tm[k]
        ynext = y_out[k + 1]
        cont = y_out[k]
        zfit = z_out[k]
        y_old_k = y_old_tm[k] if with_residual else y_out[k + 1]
        z_old_k = z_old_tm[k] if with_residual else y_out[k + 1]
        if fast_markov2:
            g, u = _sums_markov2(x_k, ynext)
        elif fast_path2:
            g, u = _sums_path2(x_k, i_k, ynext)
        else:
            g, u = _accumulate_gu(x_k, i_k, ynext, basis_kind, degree, f)
        cy, lam, ok = _fit_from_normal(g, u, f, p, ridge_user, ridge_rel)
        if not ok:
            return ycoef, zcoef, lambdas, a_res, b_res, k
        if fast_markov2:
            u2, a_k = _cont_ztarget_markov2(
                x_k, ynext, dw_k, dt, cy[0, 0], cy[1, 0], cy[2, 0], center_z,
                y_old_k, cont, with_residual,
            )
        elif fast_path2:
            u2, a_k = _cont_ztarget_path2(
                x_k, i_k, ynext, dw_k, dt, cy, center_z, y_old_k, cont, with_residual
            )
        else:
            u2, a_k = _generic_cont_ztarget(
                x_k, i_k, ynext, dw_k, dt, cy, basis_kind, degree, f, center_z,
                y_old_k, cont, with_residual,
            )
        cz, _, ok = _fit_from_normal(g, u2, f, p, ridge_user, ridge_rel)
        if not ok:
            return ycoef, zcoef, lambdas, a_res, b_res, k
        if fast_markov2:
            b_k = _predict_z_markov2(
                x_k, cz[0, 0], cz[1, 0], cz[2, 0], z_old_k, zfit, with_residual
            )
        elif fast_path2:
            b_k = _predict_z_path2(x_k, i_k, cz, z_old_k, zfit, with_residual)
        else:
            b_k = _generic_predict_z(
                x_k, i_k, cz, basis_kind, degree, f, z_old_k, zfit, with_residual
            )
        if with_residual:
            a_res[k] = a_k
            b_res[k] = b_k
        for a in range(f):
            ycoef[k, a] = cy[a, 0]
            zcoef[k, a] = cz[a, 0]
        lambdas[k] = lam
    return ycoef, zcoef, lambdas, a_res, b_res, -1


@njit(cache=True)
def backward_sweep_1d(
    x,
    integ,
    dw,
    dt,
    y_terminal,
    basis_kind,
    degree,
    ridge_user,
    ridge_rel,
    center_z,
):
    """Path-major wrapper over the time-major sweep."""
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


@njit(cache=True, parallel=True, fastmath=True)
def interval_stats_tm(x_tm, y_tm, z_tm):
    """Fused per-row moments: x mean-square, y mean and mean-square,
    z mean |.| and mean-square. One pass over each array."""
    s1, p = x_tm.shape
    s = z_tm.shape[0]
    x_m2 = np.empty(s1)
    y_m1 = np.empty(s1)
    y_m2 = np.empty(s1)
    z_abs = np.empty(s)
    z_m2 = np.empty(s)
    for k in prange(s1):
        sx = sy = sy2 = 0.0
        xr = x_tm[k]
        yr = y_tm[k]
        for idx in range(p):
            xv = np.float64(xr[idx])
            yv = np.float64(yr[idx])
            sx += xv * xv
            sy += yv
            sy2 += yv * yv
        x_m2[k] = sx / p
        y_m1[k] = sy / p
        y_m2[k] = sy2 / p
    for k in prange(s):
        sa = s2 = 0.0
        zr = z_tm[k]
        for idx in range(p):
            zv = np.float64(zr[idx])
            sa += abs(zv)
            s2 += zv * zv
        z_abs[k] = sa / p
        z_m2[k] = s2 / p
    return x_m2, y_m1, y_m2, z_abs, z_m2


@njit(cache=True, parallel=True)
def prefix_sq_norms(values, dt):
    p, s1, d = values.shape
    out = np.empty((p, s1))
    for i in prange(p):
        acc = 0.0
        for k in range(s1):
            sq = 0.0
            for j in range(d):
                sq += values[i, k, j] * values[i, k, j]
            out[i, k] = acc + sq
            acc += sq * dt
    return out


@njit(cache=True)
def rk4_backward(c0, c1, c2, c3, y_terminal, horizon, n_grid, blowup_threshold):
    m = n_grid
    h0 = horizon / m
    y_vals = np.full(m + 1, np.inf)
    y_vals[m] = y_terminal
    y = y_terminal
    for j in range(m - 1, -1, -1):
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
                t_max = (j + 1) * h0 - (h0 - remaining)
                return y_vals, True, t_max
            guard += 1
            if guard > 1_000_000:
                t_max = (j + 1) * h0 - (h0 - remaining)
                return y_vals, True, t_max
        y_vals[j] = y
    return y_vals, False, np.nan
