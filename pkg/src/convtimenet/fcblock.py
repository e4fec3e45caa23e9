"""Fully convolutional blocks and their inference-time merge.

A block maps (B, D, M) to (B, D, M) in two residual sublayers:

* depthwise: ``Z + a_dw * GELU(BN_l(conv_kl(Z)) + BN_s(conv_ks(Z)))``
* pointwise FFN: ``Z + a_ffn * W2 · dropout(GELU(W1 · BN(Z)))``

with both residual scales starting at zero. For inference the two depthwise
branches fold their batch norms, the small kernel is zero-padded to the large
one, and the sum becomes a single depthwise convolution.
"""
from dataclasses import dataclass

import numpy as np

from .numcore import (GELU, BatchNorm1d, Conv1d, Dropout, Module, ScaledResidual,
                      ShapeError)


class MergeError(RuntimeError):
    """Raised when a block cannot be merged in its current state."""


@dataclass(frozen=True)
class StagePlan:
    kernel_sizes: tuple = (7, 7, 13, 13, 19, 19)
    small_kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if not self.kernel_sizes:
            raise ShapeError("stage plan needs at least one block")
        for k in self.kernel_sizes + (self.small_kernel,):
            if k < 1 or k % 2 == 0:
                raise ShapeError(f"kernel size {k} must be a positive odd integer")
        if self.small_kernel >= min(self.kernel_sizes):
            raise ShapeError(
                f"small_kernel={self.small_kernel} must be smaller than every block kernel "
                f"(min {min(self.kernel_sizes)})")

    @property
    def stages(self):
        """Runs of equal consecutive kernel sizes as ``(kernel, count)`` pairs."""
        out = []
        for k in self.kernel_sizes:
            if out and out[-1][0] == k:
                out[-1] = (k, out[-1][1] + 1)
            else:
                out.append((k, 1))
        return out

    @property
    def receptive_field(self):
        return 1 + sum(k - 1 for k in self.kernel_sizes)


# ---------------------------------------------------------------- folding

def fold_bn(conv_w, conv_b, bn):
    """Fold an eval-mode batch norm that follows a convolution into it.

    ``conv_w`` has output channels on axis 0. Returns ``(w', b')`` such that
    ``bn(conv(x)) == conv'(x)``.
    """
    if bn.training:
        raise MergeError("cannot fold a batch norm that is in train mode")
    scale, shift = bn.scale_shift()
    w = conv_w * scale.reshape((-1,) + (1,) * (conv_w.ndim - 1))
    b = conv_b * scale + shift
    return w.astype(conv_w.dtype, copy=False), b.astype(conv_b.dtype, copy=False)


def fold_bn_into_next(bn, w, b):
    """Fold an eval-mode batch norm that precedes a pointwise conv (Cout, Cin, 1)."""
    if bn.training:
        raise MergeError("cannot fold a batch norm that is in train mode")
    scale, shift = bn.scale_shift()
    w2 = w * scale[None, :, None]
    b2 = b + np.einsum("oi,i->o", w[:, :, 0], shift)
    return w2.astype(w.dtype, copy=False), b2.astype(b.dtype, copy=False)


def pad_kernel(w_small, k_large):
    """Zero-pad a (C, 1, k_s) depthwise kernel symmetrically to length ``k_large``."""
    k_s = w_small.shape[-1]
    if (k_large - k_s) % 2:
        raise MergeError(f"kernel sizes {k_large} and {k_s} differ by an odd amount")
    p = (k_large - k_s) // 2
    return np.pad(w_small, [(0, 0)] * (w_small.ndim - 1) + [(p, p)])


# ----------------------------------------------------------------- blocks

class _FFN(Module):
    def __init__(self, D, r, dropout, learnable, rng, dtype, norm=True):
        self.norm = BatchNorm1d(D, dtype=dtype) if norm else None
        self.pw1 = Conv1d(D, r * D, 1, rng=rng, dtype=dtype)
        self.act = GELU()
        self.drop = Dropout(dropout)
        self.pw2 = Conv1d(r * D, D, 1, rng=rng, dtype=dtype)
        self.residual = ScaledResidual(learnable, dtype)

    def forward(self, z):
        u = self.norm.forward(z) if self.norm is not None else z
        u = self.drop.forward(self.act.forward(self.pw1.forward(u)))
        return self.residual.forward(z, self.pw2.forward(u))

    def backward(self, gy):
        gz, gv = self.residual.backward(gy)
        gu = self.pw1.backward(self.act.backward(self.drop.backward(self.pw2.backward(gv))))
        if self.norm is not None:
            gu = self.norm.backward(gu)
        return gz + gu


class Block(Module):
    """Dual-branch training-time block."""

    def __init__(self, D, kernel_size, small_kernel=5, r=2, dropout=0.0,
                 learnable_residual=True, ffn_learnable_residual=None, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0 or small_kernel % 2 == 0:
            raise ShapeError(f"kernel sizes must be odd, got {kernel_size} and {small_kernel}")
        if small_kernel >= kernel_size:
            raise ShapeError(f"small kernel {small_kernel} must be smaller than {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        if ffn_learnable_residual is None:
            ffn_learnable_residual = learnable_residual
        self.D = D
        self.conv_large = Conv1d(D, D, kernel_size, groups=D, rng=rng, dtype=dtype)
        self.bn_large = BatchNorm1d(D, dtype=dtype)
        self.conv_small = Conv1d(D, D, small_kernel, groups=D, rng=rng, dtype=dtype)
        self.bn_small = BatchNorm1d(D, dtype=dtype)
        self.act = GELU()
        self.dw_residual = ScaledResidual(learnable_residual, dtype)
        self.ffn = _FFN(D, r, dropout, ffn_learnable_residual, rng, dtype)

    @property
    def kernel_size(self):
        return self.conv_large.kernel_size

    def dw_forward(self, z):
        if z.ndim != 3 or z.shape[1] != self.D:
            raise ShapeError(f"block expects (B, {self.D}, M), got {z.shape}")
        a = self.bn_large.forward(self.conv_large.forward(z))
        s = self.bn_small.forward(self.conv_small.forward(z))
        return self.dw_residual.forward(z, self.act.forward(a + s))

    def dw_backward(self, gy):
        gz, gb = self.dw_residual.backward(gy)
        gu = self.act.backward(gb)
        gz = gz + self.conv_large.backward(self.bn_large.backward(gu))
        return gz + self.conv_small.backward(self.bn_small.backward(gu))

    def forward(self, z):
        return self.ffn.forward(self.dw_forward(z))

    def backward(self, gy):
        return self.dw_backward(self.ffn.backward(gy))


class MergedBlock(Module):
    """Inference form: one depthwise conv per block, batch norms folded."""

    def __init__(self, D, kernel_size, r=2, dropout=0.0, learnable_residual=True,
                 ffn_learnable_residual=None, dtype=np.float32):
        if ffn_learnable_residual is None:
            ffn_learnable_residual = learnable_residual
        self.D = D
        self.conv = Conv1d(D, D, kernel_size, groups=D, dtype=dtype)
        self.act = GELU()
        self.dw_residual = ScaledResidual(learnable_residual, dtype)
        self.ffn = _FFN(D, r, dropout, ffn_learnable_residual, np.random.default_rng(0), dtype, norm=False)
        self.training = False

    @property
    def kernel_size(self):
        return self.conv.kernel_size

    def forward(self, z):
        if z.ndim != 3 or z.shape[1] != self.D:
            raise ShapeError(f"block expects (B, {self.D}, M), got {z.shape}")
        z = self.dw_residual.forward(z, self.act.forward(self.conv.forward(z)))
        return self.ffn.forward(z)

    def backward(self, gy):
        raise MergeError("merged blocks are inference-only")


def merge_branches(block):
    """Collapse an eval-mode :class:`Block` into an equivalent :class:`MergedBlock`."""
    if block.training:
        raise MergeError("merge requires eval mode")
    k_l = block.conv_large.kernel_size
    w_l, b_l = fold_bn(block.conv_large.weight.value, block.conv_large.bias.value, block.bn_large)
    w_s, b_s = fold_bn(block.conv_small.weight.value, block.conv_small.bias.value, block.bn_small)
    ffn = block.ffn
    merged = MergedBlock(
        block.D, k_l, r=ffn.pw1.weight.value.shape[0] // block.D, dropout=ffn.drop.p,
        learnable_residual=block.dw_residual.alpha is not None,
        ffn_learnable_residual=ffn.residual.alpha is not None,
        dtype=w_l.dtype,
    )
    merged.conv.weight.value = w_l + pad_kernel(w_s, k_l)
    merged.conv.bias.value = b_l + b_s
    if block.dw_residual.alpha is not None:
        merged.dw_residual.alpha.value = block.dw_residual.alpha.value.copy()
    w1, b1 = fold_bn_into_next(ffn.norm, ffn.pw1.weight.value, ffn.pw1.bias.value)
    merged.ffn.pw1.weight.value, merged.ffn.pw1.bias.value = w1, b1
    merged.ffn.pw2.weight.value = ffn.pw2.weight.value.copy()
    merged.ffn.pw2.bias.value = ffn.pw2.bias.value.copy()
    if ffn.residual.alpha is not None:
        merged.ffn.residual.alpha.value = ffn.residual.alpha.value.copy()
    for p in merged.params():
        p.grad = np.zeros_like(p.value)
    return merged.eval()


def build_backbone(plan, D, r=2, dropout=0.0, learnable_residual=True,
                   ffn_learnable_residual=None, rng=None, dtype=np.float32):
    """One :class:`Block` per entry of ``plan.kernel_sizes``, in order."""
    if not isinstance(plan, StagePlan):
        plan = StagePlan(tuple(plan))
    rng = rng if rng is not None else np.random.default_rng(0)
    return [
        Block(D, k, plan.small_kernel, r, dropout, learnable_residual, ffn_learnable_residual,
              rng=rng, dtype=dtype)
        for k in plan.kernel_sizes
    ]
