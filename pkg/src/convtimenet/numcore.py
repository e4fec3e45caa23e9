"""Minimal differentiable layer kit.

Only the fixed layer set the model needs is covered. Each op comes as a
forward function plus a hand-derived adjoint, and the ``Module`` classes wrap
those pairs with cached activations so a model can run ``forward`` then
``backward`` without a general autodiff graph.

Tensors are plain ``numpy.ndarray`` objects; float32 is the training default
and float64 is required for gradient checks.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import kernels

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an op's contract."""


class NotFittedError(RuntimeError):
    """Raised when eval-mode batch norm has no running statistics."""


class Param:
    """A trainable tensor with an additive gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Param(shape={self.value.shape}, dtype={self.value.dtype})"


def uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------- conv1d

def _check_conv(x, w, b, groups, pad):
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be (B, Cin, L), got shape {x.shape}")
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be (Cout, Cin/groups, k), got shape {w.shape}")
    cin, cout, k = x.shape[1], w.shape[0], w.shape[2]
    if groups < 1 or cin % groups:
        raise ShapeError(f"Cin={cin} is not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"Cout={cout} is not divisible by groups={groups}")
    if w.shape[1] != cin // groups:
        raise ShapeError(f"weight dim 1 is {w.shape[1]}, expected Cin/groups={cin // groups}")
    if k % 2 == 0:
        raise ShapeError(f"kernel size k={k} must be odd")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match Cout={cout}")
    if pad < 0:
        raise ShapeError(f"pad={pad} must be non-negative")
    if x.shape[2] + 2 * pad - k + 1 < 1:
        raise ShapeError(f"output length L'={x.shape[2] + 2 * pad - k + 1} < 1")


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad)))


def conv1d(x, w, b=None, groups=1, pad=0):
    """Stride-1 cross-correlation with zero padding.

    ``x`` is (B, Cin, L), ``w`` is (Cout, Cin/groups, k); output length is
    ``L + 2*pad - k + 1``. Depthwise convolution is ``groups == Cin == Cout``.
    """
    _check_conv(x, w, b, groups, pad)
    B, cin, _ = x.shape
    cout, cg, k = w.shape
    if b is None:
        b = np.zeros(cout, dtype=x.dtype)
    if k == 1 and groups == 1 and pad == 0:
        return np.matmul(w[:, :, 0], x) + b[None, :, None]
    xp = _pad(x, pad)
    if groups == cin == cout:
        return kernels.dw_conv1d_forward(xp, w[:, 0, :], b)
    lout = xp.shape[2] - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # B, Cin, L', k
    og = cout // groups
    out = np.empty((B, cout, lout), dtype=x.dtype)
    for g in range(groups):
        wg = w[g * og:(g + 1) * og]
        xg = win[:, g * cg:(g + 1) * cg]
        out[:, g * og:(g + 1) * og] = np.einsum("bilk,oik->bol", xg, wg, optimize=True)
    out += b[None, :, None]
    return out


def conv1d_backward(x, w, gy, groups=1, pad=0):
    """Adjoint of :func:`conv1d`; returns ``(gx, gw, gb)``."""
    B, cin, L = x.shape
    cout, cg, k = w.shape
    gb = gy.sum(axis=(0, 2))
    if k == 1 and groups == 1 and pad == 0:
        gw = np.einsum("bol,bil->oi", gy, x, optimize=True)[:, :, None]
        gx = np.matmul(w[:, :, 0].T, gy)
        return gx, gw, gb
    xp = _pad(x, pad)
    if groups == cin == cout:
        gxp, gw2 = kernels.dw_conv1d_backward(xp, w[:, 0, :], gy)
        return gxp[:, :, pad:pad + L], gw2[:, None, :], gb
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    lout = gy.shape[2]
    og = cout // groups
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for g in range(groups):
        sl_o = slice(g * og, (g + 1) * og)
        sl_i = slice(g * cg, (g + 1) * cg)
        gw[sl_o] = np.einsum("bol,bilk->oik", gy[:, sl_o], win[:, sl_i], optimize=True)
        gwin = np.einsum("bol,oik->bilk", gy[:, sl_o], w[sl_o], optimize=True)
        for j in range(k):
            gxp[:, sl_i, j:j + lout] += gwin[..., j]
    return gxp[:, :, pad:pad + L], gw, gb


# ------------------------------------------------------------- batchnorm

def batchnorm_forward(x, gamma, beta, mean, var, eps):
    """Per-channel affine normalization over the B and L axes of (B, C, L)."""
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    return gamma[None, :, None] * xhat + beta[None, :, None], xhat, inv


def batchnorm_backward_train(gy, xhat, inv, gamma):
    """Adjoint through batch statistics. Returns ``(gx, ggamma, gbeta)``."""
    n = gy.shape[0] * gy.shape[2]
    gbeta = gy.sum(axis=(0, 2))
    ggamma = (gy * xhat).sum(axis=(0, 2))
    gxhat = gy * gamma[None, :, None]
    gx = (inv[None, :, None] / n) * (
        n * gxhat - gxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return gx, ggamma, gbeta


# ------------------------------------------------------------------ gelu

def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return x * ndtr(x)


def gelu_backward(x, gy):
    return gy * (ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI).astype(x.dtype, copy=False)


# ---------------------------------------------------------------- linear

def linear(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match {w.shape[0]} outputs")
    return x @ w.T + b


def linear_backward(x, w, gy):
    return gy @ w, gy.T @ x, gy.sum(axis=0)


# --------------------------------------------------------------- dropout

def dropout_mask(shape, p, seed, dtype):
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype.type(1.0 - p)


def dropout(x, p, training, seed):
    """Returns ``(y, mask)``; ``mask`` is None when dropout is a no-op."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    mask = dropout_mask(x.shape, p, seed, x.dtype)
    return x * mask, mask


def dropout_backward(gy, mask):
    return gy if mask is None else gy * mask


# ------------------------------------------------------------ add_scaled

def add_scaled(base, branch, alpha):
    """``base + alpha * branch``; an exact copy of ``base`` when alpha is 0."""
    if base.shape != branch.shape:
        raise ShapeError(f"add_scaled: base {base.shape} vs branch {branch.shape}")
    a = alpha.item()
    if a == 0.0:
        return base.copy()
    return base + alpha.reshape(()) * branch


def add_scaled_backward(gy, branch, alpha):
    """Returns ``(gbase, gbranch, galpha)``."""
    return gy, gy * alpha.reshape(()), np.array([np.sum(gy * branch)], dtype=alpha.dtype)


# ================================================================ modules

class Module:
    """Container base: discovers Params, sub-Modules and lists of Modules."""

    training = True
    _buffers = ()

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_params(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Param):
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_params(f"{prefix}{name}.")

    def params(self):
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def num_params(self):
        return sum(p.value.size for p in self.params())


class Conv1d(Module):
    def __init__(self, cin, cout, k, groups=1, rng=None, dtype=np.float32, same=True):
        if k % 2 == 0:
            raise ShapeError(f"kernel size k={k} must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.groups = groups
        self.pad = (k - 1) // 2 if same else 0
        fan_in = (cin // groups) * k
        self.weight = Param(uniform_init(rng, (cout, cin // groups, k), fan_in, dtype))
        self.bias = Param(np.zeros(cout, dtype=dtype))
        self._x = None

    @property
    def kernel_size(self):
        return self.weight.value.shape[2]

    def forward(self, x):
        self._x = x
        return conv1d(x, self.weight.value, self.bias.value, self.groups, self.pad)

    def backward(self, gy):
        gx, gw, gb = conv1d_backward(self._x, self.weight.value, gy, self.groups, self.pad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class BatchNorm1d(Module):
    """Batch norm over (B, C, L) with running statistics.

    Running statistics start unset; eval mode raises :class:`NotFittedError`
    until a train-mode forward has run or :meth:`seed_stats` was called.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = None
        self.running_var = None
        self._cache = None

    @property
    def fitted(self):
        return self.running_mean is not None

    def seed_stats(self, mean=0.0, var=1.0):
        dtype = self.gamma.value.dtype
        self.running_mean = np.full(self.channels, mean, dtype=dtype)
        self.running_var = np.full(self.channels, var, dtype=dtype)
        return self

    def scale_shift(self):
        """Eval-mode per-channel ``(scale, shift)`` with ``y = scale*x + shift``."""
        if not self.fitted:
            raise NotFittedError("batch norm running statistics are not initialized")
        scale = self.gamma.value / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.value - self.running_mean * scale

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects C={self.channels} channels, got shape {x.shape}")
        g, b = self.gamma.value, self.beta.value
        if self.training:
            if x.shape[0] * x.shape[2] < 2:
                raise ShapeError("train-mode batchnorm needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            y, xhat, inv = batchnorm_forward(x, g, b, mean, var, self.eps)
            if not self.fitted:
                self.seed_stats()
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(g.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(g.dtype)
            self._cache = ("train", xhat, inv)
        else:
            if not self.fitted:
                raise NotFittedError("batch norm running statistics are not initialized")
            y, xhat, inv = batchnorm_forward(x, g, b, self.running_mean, self.running_var, self.eps)
            self._cache = ("eval", xhat, inv)
        return y

    def backward(self, gy):
        mode, xhat, inv = self._cache
        g = self.gamma.value
        if mode == "train":
            gx, gg, gb = batchnorm_backward_train(gy, xhat, inv, g)
        else:
            gg = (gy * xhat).sum(axis=(0, 2))
            gb = gy.sum(axis=(0, 2))
            gx = gy * (g * inv)[None, :, None]
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class GELU(Module):
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return gelu(x)

    def backward(self, gy):
        return gelu_backward(self._x, gy)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(uniform_init(rng, (n_out, n_in), n_in, dtype))
        self.bias = Param(np.zeros(n_out, dtype=dtype))
        self._x = None

    def forward(self, x):
        self._x = x
        return linear(x, self.weight.value, self.bias.value)

    def backward(self, gy):
        gx, gw, gb = linear_backward(self._x, self.weight.value, gy)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Dropout(Module):
    """Inverted dropout. The owner assigns ``seed`` before each train forward."""

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.seed = 0
        self._mask = None

    def forward(self, x):
        y, self._mask = dropout(x, self.p, self.training, self.seed)
        return y

    def backward(self, gy):
        return dropout_backward(gy, self._mask)


class ScaledResidual(Module):
    """``base + alpha * branch`` with trainable ``alpha`` (zero at init).

    With ``learnable=False`` the residual is plain: ``base + branch``.
    """

    def __init__(self, learnable=True, dtype=np.float32):
        self.alpha = Param(np.zeros(1, dtype=dtype)) if learnable else None
        self._branch = None

    def forward(self, base, branch):
        if self.alpha is None:
            if base.shape != branch.shape:
                raise ShapeError(f"residual: base {base.shape} vs branch {branch.shape}")
            return base + branch
        self._branch = branch
        return add_scaled(base, branch, self.alpha.value)

    def backward(self, gy):
        """Returns ``(gbase, gbranch)``."""
        if self.alpha is None:
            return gy, gy
        gbase, gbranch, galpha = add_scaled_backward(gy, self._branch, self.alpha.value)
        self.alpha.grad += galpha
        return gbase, gbranch


# ================================================================== adam

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """One bias-corrected Adam update in place. Gradients are left untouched."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if i not in state.m:
            state.m[i] = np.zeros_like(p.value)
            state.v[i] = np.zeros_like(p.value)
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.value -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.value.dtype, copy=False)


# ============================================================ grad check

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list
    tol: float

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def worst(self):
        return max(self.entries, key=lambda e: e.max_rel_err)

    def format(self):
        lines = []
        for e in self.entries:
            flag = "ok  " if e.max_rel_err <= self.tol else "FAIL"
            lines.append(
                f"{flag} {e.name:<40s} rel_err={e.max_rel_err:.3e} at {e.worst_index} "
                f"(analytic={e.analytic:.6e}, numeric={e.numeric:.6e}, n={e.checked})"
            )
        return "\n".join(lines)


def grad_check(f, params, h=1e-5, tol=1e-4, max_coords=64, rng=None, floor_frac=1e-3, atol=0.0):
    """Compare analytic gradients against central differences.

    ``f()`` must return a scalar loss computed from the current values of
    ``params`` (a list of ``(name, Param)``), and ``f(backward=True)`` must
    additionally leave d(loss)/d(param) in each ``Param.grad`` (callers zero
    the grads inside ``f``). At most ``max_coords`` coordinates per tensor are
    probed, chosen at random when the tensor is larger.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is the largest of ``atol``, ``floor_frac`` times the
    largest analytic magnitude in that tensor, and the gradient magnitude
    central differences cannot resolve at this ``h`` (roundoff in ``f`` divided
    by ``h * tol``). Coordinates whose true gradient is negligible or exactly
    zero are thus judged on an absolute scale.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for _, p in params:
        if p.value.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    f0 = f(backward=True)
    resolvable = 10 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / (h * tol)
    analytic = {name: p.grad.copy() for name, p in params}
    entries = []
    for name, p in params:
        flat = p.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        floor = max(floor_frac * float(np.abs(a_flat).max()), atol, resolvable)
        worst = (0.0, 0, 0.0, 0.0)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            if rel >= worst[0]:
                worst = (rel, int(i), float(a), float(num))
        entries.append(GradCheckEntry(
            name, worst[0], np.unravel_index(worst[1], p.value.shape), worst[2], worst[3], len(idx),
        ))
    return GradCheckReport(entries, tol)
