"""Kernel backend selection.

The hot numeric kernels exist twice: jitted (``numba_impl``) and pure numpy
(``numpy_impl``). The env var FBSDE_LAB_NUMBA selects the backend at import
time: unset or "1" -> numba, "0" -> numpy fallback. ``get_backend`` exposes
both for the benchmark script and backend-agreement tests.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import numpy_impl
from .numpy_impl import BASIS_MARKOV, BASIS_PATH, RIDGE_REL_DEFAULT, n_features

_env = os.environ.get("FBSDE_LAB_NUMBA", "1").strip().lower()
_want_numba = _env not in ("0", "false", "no", "off")

if _want_numba:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError as exc:  # pragma: no cover - env without numba
        warnings.warn(f"numba backend unavailable ({exc}); using numpy fallback")
        _impl = numpy_impl
        BACKEND = "numpy"
else:
    _impl = numpy_impl
    BACKEND = "numpy"


def get_backend(name: str):
    """Return the kernel module for 'numba' or 'numpy' (for benchmarks/tests)."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl

        return numba_impl
    raise ValueError(f"unknown backend {name!r}")


def prefix_sq_norms(values: np.ndarray, dt: float) -> np.ndarray:
    return _impl.prefix_sq_norms(np.ascontiguousarray(values, dtype=np.float64), float(dt))


def rk4_backward(coeffs, y_terminal, horizon, n_grid, blowup_threshold):
    c0, c1, c2, c3 = (float(c) for c in coeffs)
    return _impl.rk4_backward(
        c0, c1, c2, c3, float(y_terminal), float(horizon), int(n_grid), float(blowup_threshold)
    )


def backward_sweep_1d(x, integ, dw, dt, y_terminal, basis_kind, degree, ridge_user, ridge_rel, center_z):
    return _impl.backward_sweep_1d(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(integ, dtype=np.float64),
        np.ascontiguousarray(dw, dtype=np.float64),
        float(dt),
        np.ascontiguousarray(y_terminal, dtype=np.float64),
        int(basis_kind),
        int(degree),
        float(ridge_user),
        float(ridge_rel),
        bool(center_z),
    )


def backward_sweep_1d_tm(
    x_tm, i_tm, dw_tm, dt, y_terminal, basis_kind, degree, ridge_user, ridge_rel,
    center_z, y_old_tm, z_old_tm, with_residual, y_out, z_out,
):
    return _impl.backward_sweep_1d_tm(
        x_tm,
        i_tm,
        dw_tm,
        float(dt),
        y_terminal,
        int(basis_kind),
        int(degree),
        float(ridge_user),
        float(ridge_rel),
        bool(center_z),
        y_old_tm,
        z_old_tm,
        bool(with_residual),
        y_out,
        z_out,
    )


def interval_stats_tm(x_tm, y_tm, z_tm):
    return _impl.interval_stats_tm(x_tm, y_tm, z_tm)
