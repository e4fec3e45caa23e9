import numpy as np
import pytest

from convtimenet.fcblock import (Block, MergeError, StagePlan, build_backbone, fold_bn,
                                 fold_bn_into_next, merge_branches, pad_kernel)
from convtimenet.harness import gradcheck_cmd, randomize
from convtimenet.numcore import BatchNorm1d, ShapeError, conv1d


def trained_block(rng, D=8, k=13, ks=5, dtype=np.float32, learnable=True):
    """A block moved off its init point and given non-trivial eval statistics."""
    blk = Block(D, k, ks, 2, dropout=0.1, learnable_residual=learnable, rng=rng, dtype=dtype)
    for m in blk.modules():
        if isinstance(m, BatchNorm1d):
            m.seed_stats()
    for _, p in blk.named_params():
        p.value += rng.normal(0, 0.3, p.shape).astype(dtype)
    for m in blk.modules():
        if isinstance(m, BatchNorm1d):
            m.running_mean = rng.normal(0, 0.5, D).astype(dtype)
            m.running_var = rng.uniform(0.5, 2.0, D).astype(dtype)
    return blk.eval()


# --------------------------------------------------------------- identities

def test_block_is_identity_at_init(rng):
    blk = Block(16, 7, rng=rng)
    z = rng.standard_normal((3, 16, 20)).astype(np.float32)
    for mode in (True, False):
        blk.train(mode)
        np.testing.assert_array_equal(blk.forward(z), z)


def test_deep_backbone_is_identity_at_init(rng):
    blocks = build_backbone([7, 7, 13, 13, 19, 19], 16, rng=rng)
    z = rng.standard_normal((2, 16, 30)).astype(np.float32)
    out = z
    for b in blocks:
        out = b.forward(out)
    np.testing.assert_array_equal(out, z)


def test_zero_branches_identity_with_unit_alpha(rng):
    blk = Block(4, 7, 3, rng=rng, dtype=np.float64)
    for m in blk.modules():
        if isinstance(m, BatchNorm1d):
            m.seed_stats(0.0, 1.0 - m.eps)
    blk.eval()
    for c in (blk.conv_large, blk.conv_small):
        c.weight.value[...] = 0
    blk.dw_residual.alpha.value[...] = 1
    z = rng.standard_normal((2, 4, 9))
    np.testing.assert_allclose(blk.dw_forward(z), z, atol=1e-15)


def test_delta_small_kernel_gives_gelu_residual(rng):
    from convtimenet.numcore import gelu
    blk = Block(4, 7, 3, rng=rng, dtype=np.float64)
    for m in blk.modules():
        if isinstance(m, BatchNorm1d):
            m.seed_stats(0.0, 1.0 - m.eps)
    blk.eval()
    blk.conv_large.weight.value[...] = 0
    blk.conv_small.weight.value[...] = 0
    blk.conv_small.weight.value[:, 0, 1] = 1
    blk.dw_residual.alpha.value[...] = 1
    z = rng.standard_normal((2, 4, 9))
    np.testing.assert_allclose(blk.dw_forward(z), z + gelu(z), atol=1e-12)


def test_ffn_identity_weights_give_gelu_residual(rng):
    from convtimenet.numcore import gelu
    blk = Block(3, 7, 3, r=1, rng=rng, dtype=np.float64)
    ffn = blk.ffn
    ffn.norm.seed_stats(0.0, 1.0 - ffn.norm.eps)
    blk.eval()
    ffn.pw1.weight.value[...] = np.eye(3)[:, :, None]
    ffn.pw2.weight.value[...] = np.eye(3)[:, :, None]
    ffn.residual.alpha.value[...] = 1
    z = rng.standard_normal((2, 3, 5))
    np.testing.assert_allclose(ffn.forward(z), z + gelu(z), atol=1e-12)


def test_block_preserves_shape_and_checks_it(rng):
    blk = trained_block(rng)
    assert blk.forward(rng.standard_normal((2, 8, 11)).astype(np.float32)).shape == (2, 8, 11)
    with pytest.raises(ShapeError):
        blk.forward(np.zeros((2, 7, 11), dtype=np.float32))


@pytest.mark.parametrize("k,ks", [(8, 5), (7, 4), (5, 5), (5, 7)])
def test_block_rejects_bad_kernels(k, ks):
    with pytest.raises(ShapeError):
        Block(4, k, ks)


# ----------------------------------------------------------------- folding

def test_fold_bn_identity_statistics(rng):
    bn = BatchNorm1d(3, dtype=np.float64).seed_stats(0.0, 1.0 - 1e-5).eval()
    w, b = rng.standard_normal((3, 1, 5)), rng.standard_normal(3)
    w2, b2 = fold_bn(w, b, bn)
    np.testing.assert_allclose(w2, w, rtol=1e-12)
    np.testing.assert_allclose(b2, b, rtol=1e-12)


def test_fold_bn_pure_scale(rng):
    bn = BatchNorm1d(3, dtype=np.float64).seed_stats(0.0, 1.0 - 1e-5).eval()
    bn.gamma.value[...] = 2
    w, b = rng.standard_normal((3, 1, 5)), rng.standard_normal(3)
    w2, b2 = fold_bn(w, b, bn)
    np.testing.assert_allclose(w2, 2 * w, rtol=1e-12)
    np.testing.assert_allclose(b2, 2 * b, rtol=1e-12)


def test_fold_bn_matches_conv_then_norm(rng):
    C = 6
    bn = BatchNorm1d(C, dtype=np.float64).seed_stats()
    bn.gamma.value = rng.normal(1, 0.5, C)
    bn.beta.value = rng.normal(0, 0.5, C)
    bn.running_mean = rng.normal(0, 1, C)
    bn.running_var = rng.uniform(0.1, 3, C)
    bn.eval()
    w, b = rng.standard_normal((C, 1, 7)), rng.standard_normal(C)
    w2, b2 = fold_bn(w, b, bn)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((1, C, 15))
        ref = bn.forward(conv1d(x, w, b, groups=C, pad=3))
        worst = max(worst, np.abs(ref - conv1d(x, w2, b2, groups=C, pad=3)).max())
    assert worst <= 1e-6


def test_fold_into_following_pointwise(rng):
    bn = BatchNorm1d(4, dtype=np.float64).seed_stats()
    bn.gamma.value = rng.normal(1, 0.5, 4)
    bn.running_mean = rng.normal(0, 1, 4)
    bn.running_var = rng.uniform(0.1, 3, 4)
    bn.eval()
    w, b = rng.standard_normal((5, 4, 1)), rng.standard_normal(5)
    w2, b2 = fold_bn_into_next(bn, w, b)
    x = rng.standard_normal((2, 4, 6))
    np.testing.assert_allclose(conv1d(bn.forward(x), w, b), conv1d(x, w2, b2), atol=1e-12)


def test_fold_rejects_train_mode():
    with pytest.raises(MergeError):
        fold_bn(np.zeros((2, 1, 3)), np.zeros(2), BatchNorm1d(2).seed_stats())


def test_pad_kernel_placement():
    w = np.array([[[1.0, 2.0, 3.0]]])
    np.testing.assert_array_equal(pad_kernel(w, 7), [[[0, 0, 1, 2, 3, 0, 0]]])
    with pytest.raises(MergeError):
        pad_kernel(w, 6)


# ------------------------------------------------------------------- merge

@pytest.mark.parametrize("k,ks", [(7, 5), (19, 5), (13, 3)])
def test_merged_block_matches_dual_branch(rng, k, ks):
    for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
        blk = trained_block(rng, k=k, ks=ks, dtype=dtype)
        merged = merge_branches(blk)
        assert merged.kernel_size == k
        x = rng.standard_normal((20, 8, 24)).astype(dtype)
        out = merged.forward(x)
        assert out.dtype == dtype
        assert np.abs(out - blk.forward(x)).max() <= tol


def test_merge_with_zero_small_branch_equals_folded_large(rng):
    blk = trained_block(rng, dtype=np.float64)
    blk.conv_small.weight.value[...] = 0
    blk.conv_small.bias.value[...] = 0
    blk.bn_small.beta.value[...] = 0
    blk.bn_small.running_mean[...] = 0
    merged = merge_branches(blk)
    w, b = fold_bn(blk.conv_large.weight.value, blk.conv_large.bias.value, blk.bn_large)
    np.testing.assert_allclose(merged.conv.weight.value, w)
    np.testing.assert_allclose(merged.conv.bias.value, b)


def test_merge_plain_residual_block(rng):
    blk = trained_block(rng, dtype=np.float64, learnable=False)
    merged = merge_branches(blk)
    assert merged.dw_residual.alpha is None
    x = rng.standard_normal((3, 8, 16))
    np.testing.assert_allclose(merged.forward(x), blk.forward(x), atol=1e-10)


def test_merge_requires_eval_and_merged_is_inference_only(rng):
    blk = trained_block(rng)
    with pytest.raises(MergeError):
        merge_branches(blk.train())
    merged = merge_branches(blk.eval())
    with pytest.raises(MergeError):
        merged.backward(np.zeros((1, 8, 4), dtype=np.float32))


def test_block_gradients():
    for name, rep in gradcheck_cmd("block"):
        assert rep.passed, f"{name}\n{rep.format()}"


# ------------------------------------------------------------------ plans

@pytest.mark.parametrize("plan,stages", [
    ([7, 7, 13, 13, 19, 19], [(7, 2), (13, 2), (19, 2)]),
    ([19] * 6, [(19, 6)]),
    ([37, 37, 43, 43, 53, 53], [(37, 2), (43, 2), (53, 2)]),
])
def test_stage_plans(plan, stages):
    p = StagePlan(tuple(plan))
    assert p.stages == stages
    blocks = build_backbone(p, 4)
    assert [b.kernel_size for b in blocks] == plan


def test_plan_validation():
    with pytest.raises(ShapeError):
        StagePlan((7, 7), small_kernel=7)
    with pytest.raises(ShapeError):
        StagePlan((7, 8))
    with pytest.raises(ShapeError):
        StagePlan(())
    assert [b.kernel_size for b in build_backbone([7, 13], 4)] == [7, 13]


@pytest.mark.parametrize("plan", [(7, 13), (7, 7, 13, 13, 19, 19), (9,)])
def test_receptive_field_by_impulse(rng, plan):
    """Support of the impulse response of the linearized backbone."""
    p = StagePlan(plan, small_kernel=3)
    M = 2 * p.receptive_field + 5
    x = np.zeros((1, 1, M))
    x[0, 0, M // 2] = 1.0
    for k in plan:
        w = rng.uniform(0.5, 1.0, (1, 1, k))  # strictly positive taps: no cancellation
        x = x + conv1d(x, w, groups=1, pad=(k - 1) // 2)
    support = np.flatnonzero(np.abs(x[0, 0]) > 0)
    assert support[-1] - support[0] + 1 == p.receptive_field == 1 + sum(k - 1 for k in plan)
