"""Backend selection for the hot loops.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used. Set ``CONVTIMENET_BACKEND=python`` to force the fallback, or
call :func:`set_backend` at runtime (the benchmark does this to compare both).
"""
import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c

_impl = _kernels_py


def available_backends():
    return sorted(_BACKENDS)


def backend():
    """Name of the active backend."""
    return "cython" if _impl is _kernels_c and _kernels_c is not None else "python"


def set_backend(name):
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    _impl = _BACKENDS[name]


set_backend(os.environ.get("CONVTIMENET_BACKEND", "cython" if _kernels_c is not None else "python"))


def _c(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def dw_conv1d_forward(xpad, w, b):
    """Depthwise cross-correlation of a pre-padded input. ``w`` is (C, k)."""
    dtype = xpad.dtype
    B, C, Lp = xpad.shape
    out = np.empty((B, C, Lp - w.shape[1] + 1), dtype=dtype)
    _impl.dw_conv1d_forward(_c(xpad, dtype), _c(w, dtype), _c(b, dtype), out)
    return out


def dw_conv1d_backward(xpad, w, gy):
    dtype = xpad.dtype
    gxpad = np.zeros(xpad.shape, dtype=dtype)
    gw = np.empty(w.shape, dtype=dtype)
    _impl.dw_conv1d_backward(_c(xpad, dtype), _c(w, dtype), _c(gy, dtype), gxpad, gw)
    return gxpad, gw


def interp_forward(series, pos):
    """Sample ``series`` (B, C, Tp) at fractional positions ``pos`` (B, Q)."""
    dtype = series.dtype
    out = np.empty(series.shape[:2] + (pos.shape[1],), dtype=dtype)
    _impl.interp_forward(_c(series, dtype), _c(pos, dtype), out)
    return out


def interp_backward(series, pos, gout):
    dtype = series.dtype
    gseries = np.zeros(series.shape, dtype=dtype)
    gpos = np.empty(pos.shape, dtype=dtype)
    _impl.interp_backward(_c(series, dtype), _c(pos, dtype), _c(gout, dtype), gseries, gpos)
    return gseries, gpos
