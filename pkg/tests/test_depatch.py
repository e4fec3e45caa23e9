import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convtimenet.depatch import (VARIANTS, DeformParams, PatchEmbedder, PatchGrid, Predictor,
                                 deform_bounds, fixed_patches, interpolate, pad_series, resample,
                                 sample_positions, uniform_grid)
from convtimenet.harness import gradcheck_cmd, randomize
from convtimenet.numcore import ShapeError


def _d(dc, dp):
    return DeformParams(np.atleast_2d(np.asarray(dc, dtype=np.float64)),
                        np.atleast_2d(np.asarray(dp, dtype=np.float64)))


# -------------------------------------------------------------------- grid

@settings(max_examples=300, deadline=None)
@given(st.integers(1, 512).flatmap(lambda T: st.tuples(
    st.just(T), st.integers(1, T).flatmap(lambda P: st.tuples(st.just(P), st.integers(1, P))))))
def test_patch_count_formula(args):
    T, (P, S) = args
    g = uniform_grid(T, P, S)
    assert g.N == (T - P) // S + 2
    # every patch fits in the padded series and the last one reaches past T
    assert g.starts[-1] + P <= g.T_pad
    assert g.starts[-1] + P > T - 1


@pytest.mark.parametrize("T,P,S", [(10, 0, 1), (10, 11, 1), (10, 4, 5), (10, 4, 0)])
def test_grid_rejects_bad_geometry(T, P, S):
    with pytest.raises(ShapeError):
        PatchGrid(T, P, S)


def test_pad_replicates_last_value():
    x = np.arange(5.0).reshape(1, 1, 5)
    np.testing.assert_array_equal(pad_series(x, 3)[0, 0], [0, 1, 2, 3, 4, 4, 4, 4])


def test_fixed_patches_are_channel_major_slices():
    g = uniform_grid(8, 4, 2)
    x = np.arange(16.0).reshape(1, 2, 8)
    p = fixed_patches(pad_series(x, 2), g)
    assert p.shape == (1, g.N, 8)
    np.testing.assert_array_equal(p[0, 1], [2, 3, 4, 5, 10, 11, 12, 13])
    np.testing.assert_array_equal(p[0, -1], [6, 7, 7, 7, 14, 15, 15, 15])


# ------------------------------------------------------------------ bounds

def test_bounds_worked_example():
    # P=16 puts centres on half-steps, so use x_c = 10.5 and dc = 1.0 to land
    # on the shifted centre 11.5 and P_new = 20 of the reference example.
    g = PatchGrid(40, 16, 1)
    i = 3
    dc = np.zeros((1, g.N))
    dp = np.zeros((1, g.N))
    dc[0, i] = 1.0
    dp[0, i] = 2.0
    L, R = deform_bounds(g, DeformParams(dc, dp))
    assert (L[0, i], R[0, i]) == (1.5, 21.5)


def test_zero_deformation_is_uniform_patch():
    g = PatchGrid(64, 16, 8)
    L, R = deform_bounds(g, _d(np.zeros(g.N), np.zeros(g.N)))
    np.testing.assert_array_equal(L[0], g.centers - 8)
    np.testing.assert_array_equal(R[0], g.centers + 8)
    np.testing.assert_array_equal(L[0], g.starts - 0.5)


def test_minimum_length_clamp():
    g = PatchGrid(64, 16, 8)
    L, R = deform_bounds(g, _d(np.zeros(g.N), np.full(g.N, -8 + 0.5 - 3.0)))
    np.testing.assert_array_equal(R - L, 1.0)


def test_bounds_stay_inside_padded_series(rng):
    g = PatchGrid(50, 8, 4)
    L, R = deform_bounds(g, _d(rng.normal(0, 40, (3, g.N)), rng.normal(0, 40, (3, g.N))))
    assert (L >= -0.5).all() and (R <= g.T_pad - 0.5).all() and (R - L >= 1 - 1e-12).all()


def test_widening_is_monotone_until_clamp():
    g = PatchGrid(100, 10, 5)
    dps = np.linspace(-4.5, 60, 400)
    widths = np.array([np.diff(deform_bounds(g, _d(np.zeros(g.N), np.full(g.N, dp))), axis=0)[0, 0, 5]
                       for dp in dps])
    steps = np.diff(widths)
    assert (steps >= 0).all()
    free = widths[1:] < (g.T_pad - 0.5) - (-0.5) - 1e-9
    # strictly increasing as long as neither end has hit the series boundary
    L, R = zip(*[deform_bounds(g, _d(np.zeros(g.N), np.full(g.N, dp))) for dp in dps])
    unclamped = np.array([(l[0, 5] > -0.5) and (r[0, 5] < g.T_pad - 0.5) for l, r in zip(L, R)])
    assert (steps[unclamped[1:] & free] > 0).all()
    assert unclamped[0] and not unclamped[-1]


# --------------------------------------------------------------- resample

def test_interpolation_midpoint():
    assert interpolate(np.array([[0.0, 10.0, 20.0, 30.0]]), np.array([1.5]))[0, 0] == 15.0


def test_grid_aligned_span_reproduces_slice(rng):
    s = rng.standard_normal((3, 40))
    for a in (0, 7, 24):
        np.testing.assert_array_equal(resample(s, a - 0.5, a + 16 - 0.5, 16), s[:, a:a + 16])


@settings(max_examples=100, deadline=None)
@given(L=st.floats(-0.5, 30.0), width=st.floats(1.0, 20.0), slope=st.floats(-5, 5), icpt=st.floats(-5, 5),
       P=st.integers(1, 12))
def test_linear_ramp_is_exact(L, width, slope, icpt, P):
    t = np.arange(52.0)
    series = np.stack([slope * t + icpt])
    R = min(L + width, 51.5)
    pos = sample_positions(np.array([L]), np.array([R]), P)[0]
    np.testing.assert_allclose(resample(series, L, R, P)[0], slope * pos + icpt, atol=1e-9)


def test_constant_series_gives_constant_samples():
    out = resample(np.full((2, 20), 3.25), 0.2, 17.9, 9)
    np.testing.assert_array_equal(out, 3.25)


def test_samples_are_equally_spaced_cell_centres():
    pos = sample_positions(np.array([2.0]), np.array([6.0]), 4)[0]
    np.testing.assert_array_equal(pos, [2.5, 3.5, 4.5, 5.5])


# ----------------------------------------------------------------- embedder

@pytest.mark.parametrize("variant", VARIANTS[1:])
def test_zero_head_predictor_reduces_to_uniform_bitwise(rng, variant):
    emb = PatchEmbedder(3, 64, 16, 8, 12, variant, rng=rng)
    for _ in range(10):
        x = rng.standard_normal((4, 3, 64)).astype(np.float32)
        a = emb.forward(x)
        b = emb.uniform_forward(x)
        assert a.dtype == np.float32
        np.testing.assert_array_equal(a, b)


def test_uniform_embedding_matches_manual_projection(rng):
    emb = PatchEmbedder(2, 20, 4, 4, 5, "uniform", rng=rng, dtype=np.float64)
    x = rng.standard_normal((1, 2, 20))
    out = emb.forward(x)
    g = emb.grid
    xp = pad_series(x, 4)
    W, b = emb.projection.weight.value, emb.projection.bias.value
    for i in range(g.N):
        tok = xp[0, :, i * 4:i * 4 + 4].reshape(-1)
        np.testing.assert_allclose(out[0, :, i], W @ tok + b)


def test_pointwise_mode_tokenizes_each_step(rng):
    emb = PatchEmbedder(2, 30, 1, 1, 4, "convconv", rng=rng)
    assert emb.N == 31
    assert emb.forward(rng.standard_normal((2, 2, 30)).astype(np.float32)).shape == (2, 4, 31)


def test_zero_projection_gives_zero_embedding(rng):
    emb = PatchEmbedder(1, 32, 8, 4, 6, "conv", rng=rng)
    emb.projection.weight.value[...] = 0
    emb.projection.bias.value[...] = 0
    assert not emb.forward(rng.standard_normal((2, 1, 32)).astype(np.float32)).any()


def test_trained_predictor_moves_patches(rng):
    emb = PatchEmbedder(1, 32, 8, 4, 6, "conv", rng=rng, dtype=np.float64)
    randomize(emb.predictor, rng)
    x = rng.standard_normal((2, 1, 32))
    d = emb.deform(x)
    assert np.abs(d.delta_c).max() > 0
    assert not np.allclose(emb.forward(x), emb.uniform_forward(x))


def test_predictor_rejects_unknown_variant():
    with pytest.raises(ValueError):
        Predictor("attention", 4, 2)


def test_embedder_shape_check(rng):
    emb = PatchEmbedder(2, 32, 8, 4, 6, "conv", rng=rng)
    with pytest.raises(ShapeError):
        emb.forward(np.zeros((1, 3, 32), dtype=np.float32))


def test_embedder_gradients():
    for name, rep in gradcheck_cmd("depatch"):
        assert rep.passed, f"{name}\n{rep.format()}"
