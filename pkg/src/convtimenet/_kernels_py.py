"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and buffer conventions are identical so :mod:`convtimenet.kernels`
can swap the two freely.
"""
import numpy as np


def dw_conv1d_forward(xpad, w, b, out):
    L = out.shape[2]
    out[...] = b[None, :, None]
    for j in range(w.shape[1]):
        out += w[None, :, j, None] * xpad[:, :, j:j + L]


def dw_conv1d_backward(xpad, w, gy, gxpad, gw):
    L = gy.shape[2]
    for j in range(w.shape[1]):
        gw[:, j] = np.einsum("ncl,ncl->c", gy, xpad[:, :, j:j + L])
        gxpad[:, :, j:j + L] += gy * w[None, :, j, None]


def _left_index(pos, tp):
    return np.clip(np.floor(pos).astype(np.intp), 0, tp - 2)


def interp_forward(series, pos, out):
    tp = series.shape[2]
    i0 = _left_index(pos, tp)
    f = (pos - i0.astype(pos.dtype))[:, None, :]
    idx = np.broadcast_to(i0[:, None, :], out.shape)
    x0 = np.take_along_axis(series, idx, axis=2)
    x1 = np.take_along_axis(series, idx + 1, axis=2)
    out[...] = x0 * (1 - f) + x1 * f


def interp_backward(series, pos, gout, gseries, gpos):
    B, C, tp = series.shape
    i0 = _left_index(pos, tp)
    f = (pos - i0.astype(pos.dtype))[:, None, :]
    idx = np.broadcast_to(i0[:, None, :], gout.shape)
    x0 = np.take_along_axis(series, idx, axis=2)
    x1 = np.take_along_axis(series, idx + 1, axis=2)
    gpos[...] = (gout * (x1 - x0)).sum(axis=1)

    base = (np.arange(B * C).reshape(B, C, 1) * tp + idx).ravel()
    size = B * C * tp
    acc = np.bincount(base, weights=(gout * (1 - f)).ravel(), minlength=size)
    acc += np.bincount(base + 1, weights=(gout * f).ravel(), minlength=size)
    gseries += acc.reshape(B, C, tp).astype(gseries.dtype, copy=False)
