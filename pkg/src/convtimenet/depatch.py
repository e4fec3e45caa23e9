"""Deformable patch embedding.

A series (B, C, T) is right-padded by repeating its last value S times and cut
into ``N = (T - P) // S + 2`` uniform patches of P steps. A small predictor
reads each fixed patch and emits a centre offset and a half-scale change; the
patch interval is moved and stretched accordingly, P points are resampled from
it by linear interpolation, and a shared linear map projects each resampled
patch to D features.

Coordinates are continuous with integer time step ``t`` owning the cell
``[t - 0.5, t + 0.5]``. A patch ``[L, R]`` is sampled at the centres of P
equal cells, so an undeformed patch samples exactly its P integer steps.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .numcore import GELU, Conv1d, Linear, Module, ShapeError

VARIANTS = ("uniform", "conv", "convconv", "mlp")


@dataclass(frozen=True)
class PatchGrid:
    T: int
    P: int
    S: int

    def __post_init__(self):
        if not 1 <= self.P <= self.T:
            raise ShapeError(f"patch size P={self.P} must satisfy 1 <= P <= T={self.T}")
        if not 1 <= self.S <= self.P:
            raise ShapeError(f"stride S={self.S} must satisfy 1 <= S <= P={self.P}")

    @property
    def N(self):
        return (self.T - self.P) // self.S + 2

    @property
    def T_pad(self):
        return self.T + self.S

    @property
    def starts(self):
        return np.arange(self.N) * self.S

    @property
    def centers(self):
        return self.starts + (self.P - 1) / 2.0


def uniform_grid(T, P, S):
    return PatchGrid(int(T), int(P), int(S))


@dataclass
class DeformParams:
    """Per-patch centre offset and half-scale change, both (B, N)."""

    delta_c: np.ndarray
    delta_p: np.ndarray


# ------------------------------------------------------------ padding/slicing

def pad_series(x, S):
    """Right-pad (B, C, T) by repeating the final value S times."""
    return np.concatenate([x, np.repeat(x[:, :, -1:], S, axis=2)], axis=2)


def pad_series_backward(gxp, T):
    gx = gxp[:, :, :T].copy()
    gx[:, :, T - 1] += gxp[:, :, T:].sum(axis=2)
    return gx


def fixed_patches(xp, grid):
    """Uniform patches of the padded series, flattened to (B, N, C*P)."""
    B, C, _ = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, grid.P, axis=2)[:, :, ::grid.S]
    win = win[:, :, :grid.N]  # B, C, N, P
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, grid.N, C * grid.P)


def fixed_patches_backward(gpatches, grid, C):
    B = gpatches.shape[0]
    g = gpatches.reshape(B, grid.N, C, grid.P)
    gxp = np.zeros((B, C, grid.T_pad), dtype=gpatches.dtype)
    starts = grid.starts
    for j in range(grid.P):
        gxp[:, :, starts + j] += g[:, :, :, j].transpose(0, 2, 1)
    return gxp


# ------------------------------------------------------------------ bounds

def deform_bounds(grid, d):
    """Deformed, clamped patch bounds ``(L, R)``, each (B, N).

    ``L`` is clamped to ``[-0.5, T_pad - 1.5]`` and ``R`` to
    ``[L + 1, T_pad - 0.5]``, i.e. the patch stays inside the padded series
    and spans at least one time step.
    """
    L, R, _ = _bounds(grid, d.delta_c, d.delta_p)
    return L, R


def _bounds(grid, dc, dp):
    xc = grid.centers.astype(dc.dtype)
    dtype = dc.dtype
    half = dtype.type(grid.P) / 2 + dp  # P_new / 2
    center = xc + dc
    l_raw = center - half
    r_raw = center + half
    lo, hi_l, hi_r = -0.5, grid.T_pad - 1.5, grid.T_pad - 0.5
    L = np.clip(l_raw, lo, hi_l)
    r_floor = L + 1
    R = np.minimum(np.maximum(r_raw, r_floor), hi_r)
    masks = (
        (l_raw >= lo) & (l_raw <= hi_l),  # L follows l_raw
        (r_raw >= r_floor) & (r_raw <= hi_r),  # R follows r_raw
        (r_raw < r_floor),  # R follows L
    )
    return L.astype(dtype, copy=False), R.astype(dtype, copy=False), masks


def _bounds_backward(gL, gR, masks):
    l_free, r_free, r_on_l = masks
    gL = gL + np.where(r_on_l, gR, 0)
    g_lraw = np.where(l_free, gL, 0)
    g_rraw = np.where(r_free, gR, 0)
    return g_lraw + g_rraw, g_rraw - g_lraw  # d/d delta_c, d/d delta_p


# --------------------------------------------------------------- resampling

def _fractions(P, dtype):
    return (np.arange(P, dtype=dtype) + dtype.type(0.5)) / dtype.type(P)


def sample_positions(L, R, P):
    """(..., P) cell-centre positions inside each ``[L, R]``."""
    step = (R - L) / L.dtype.type(P)
    offs = np.arange(P, dtype=L.dtype) + L.dtype.type(0.5)
    return L[..., None] + offs * step[..., None]


def interpolate(series, positions):
    """Linear interpolation of (C, T) or (B, C, T) at fractional positions.

    Positions outside ``[0, T-1]`` extrapolate from the nearest edge pair.
    """
    series = np.asarray(series)
    positions = np.asarray(positions, dtype=series.dtype)
    if series.ndim == 2:
        return kernels.interp_forward(series[None], positions.reshape(1, -1))[0].reshape(
            (series.shape[0],) + positions.shape)
    B = series.shape[0]
    out = kernels.interp_forward(series, positions.reshape(B, -1))
    return out.reshape((B, series.shape[1]) + positions.shape[1:])


def resample(series, L, R, P):
    """P linearly interpolated samples of ``series`` (C, T_pad) inside ``[L, R]``."""
    series = np.asarray(series)
    dtype = series.dtype
    pos = sample_positions(np.asarray([L], dtype=dtype), np.asarray([R], dtype=dtype), P)
    return interpolate(series, pos[0])


# ---------------------------------------------------------------- predictor

class Predictor(Module):
    """Maps fixed patches (B, N, F) to per-patch ``(delta_c, delta_p)``.

    Feature extractors run over the patch axis on (B, F, N). The output head
    is a pointwise layer with zero weights and bias, so a fresh predictor
    leaves every patch undeformed.
    """

    def __init__(self, variant, n_features, hidden, kernel_size=3, rng=None, dtype=np.float32):
        if variant not in VARIANTS or variant == "uniform":
            raise ValueError(f"unknown predictor variant {variant!r}; expected one of {VARIANTS[1:]}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        if variant == "mlp":
            layers = [Conv1d(n_features, hidden, 1, rng=rng, dtype=dtype), GELU()]
        else:
            layers = [Conv1d(n_features, hidden, kernel_size, rng=rng, dtype=dtype), GELU()]
            if variant == "convconv":
                layers += [Conv1d(hidden, hidden, kernel_size, groups=hidden, rng=rng, dtype=dtype), GELU()]
        self.layers = layers
        self.head = Conv1d(hidden, 2, 1, rng=rng, dtype=dtype)
        self.head.weight.value[...] = 0

    def forward(self, patches):
        h = np.ascontiguousarray(patches.transpose(0, 2, 1))
        for layer in self.layers:
            h = layer.forward(h)
        out = self.head.forward(h)
        return DeformParams(out[:, 0], out[:, 1])

    def backward(self, g_dc, g_dp):
        g = np.stack([g_dc, g_dp], axis=1)
        g = self.head.backward(g)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return np.ascontiguousarray(g.transpose(0, 2, 1))


def predict_deform(patches, predictor):
    """Deformation for one series' patches (N, F) or a batch (B, N, F)."""
    if predictor is None:
        shape = patches.shape[:-1]
        z = np.zeros(shape, dtype=patches.dtype)
        return DeformParams(z, z.copy())
    if patches.ndim == 2:
        d = predictor.forward(patches[None])
        return DeformParams(d.delta_c[0], d.delta_p[0])
    return predictor.forward(patches)


# ---------------------------------------------------------------- embedder

class PatchEmbedder(Module):
    """(B, C, T) -> (B, D, N) deformable patch tokens."""

    def __init__(self, C, T, P, S, D, variant="convconv", hidden=None, kernel_size=3,
                 rng=None, predictor_rng=None, dtype=np.float32):
        self.grid = uniform_grid(T, P, S)
        self.C, self.D = C, D
        self.variant = variant
        rng = rng if rng is not None else np.random.default_rng(0)
        self.projection = Linear(P * C, D, rng=rng, dtype=dtype)
        if variant == "uniform":
            self.predictor = None
        else:
            hidden = hidden or max(1, D // 2)
            self.predictor = Predictor(variant, P * C, hidden, kernel_size,
                                       rng=predictor_rng if predictor_rng is not None else rng, dtype=dtype)
        self._cache = None

    @property
    def N(self):
        return self.grid.N

    def _check(self, x):
        if x.ndim != 3 or x.shape[1] != self.C or x.shape[2] != self.grid.T:
            raise ShapeError(f"embedder expects (B, {self.C}, {self.grid.T}), got {x.shape}")

    def _project(self, tokens):
        B, N, F = tokens.shape
        out = self.projection.forward(tokens.reshape(B * N, F))
        return np.ascontiguousarray(out.reshape(B, N, self.D).transpose(0, 2, 1))

    def uniform_forward(self, x):
        """Fixed-patch pathway: pad, slice, project. No deformation."""
        self._check(x)
        self._cache = ("uniform", x.shape)
        return self._project(fixed_patches(pad_series(x, self.grid.S), self.grid))

    def deform(self, x):
        """Deformation parameters the predictor assigns to ``x``."""
        self._check(x)
        xp = pad_series(x, self.grid.S)
        d = predict_deform(fixed_patches(xp, self.grid), self.predictor)
        return d

    def forward(self, x):
        if self.predictor is None:
            return self.uniform_forward(x)
        self._check(x)
        g = self.grid
        B, C, _ = x.shape
        xp = pad_series(x, g.S)
        d = self.predictor.forward(fixed_patches(xp, g))
        L, R, masks = _bounds(g, d.delta_c, d.delta_p)
        pos = sample_positions(L, R, g.P).reshape(B, g.N * g.P)
        samples = kernels.interp_forward(xp, pos)  # B, C, N*P
        tokens = np.ascontiguousarray(
            samples.reshape(B, C, g.N, g.P).transpose(0, 2, 1, 3)).reshape(B, g.N, C * g.P)
        self._cache = ("deform", x.shape, xp, pos, masks)
        return self._project(tokens)

    def backward(self, gy):
        g = self.grid
        B = gy.shape[0]
        gtok = self.projection.backward(
            np.ascontiguousarray(gy.transpose(0, 2, 1)).reshape(B * g.N, self.D))
        gtok = gtok.reshape(B, g.N, self.C * g.P)
        if self._cache[0] == "uniform":
            return pad_series_backward(fixed_patches_backward(gtok, g, self.C), g.T)
        _, _, xp, pos, masks = self._cache
        gsamples = np.ascontiguousarray(
            gtok.reshape(B, g.N, self.C, g.P).transpose(0, 2, 1, 3)).reshape(B, self.C, g.N * g.P)
        gxp, gpos = kernels.interp_backward(xp, pos, gsamples)
        gpos = gpos.reshape(B, g.N, g.P)
        frac = _fractions(g.P, gpos.dtype)
        gR = gpos @ frac
        gL = gpos.sum(axis=2) - gR
        g_dc, g_dp = _bounds_backward(gL, gR, masks)
        gpatches = self.predictor.backward(g_dc.astype(gy.dtype), g_dp.astype(gy.dtype))
        gxp += fixed_patches_backward(gpatches, g, self.C)
        return pad_series_backward(gxp, g.T)
