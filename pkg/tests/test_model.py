import os
import struct

import numpy as np
import pytest

from convtimenet.fcblock import MergeError
from convtimenet.harness import gradcheck_cmd, randomize, tiny_model_config
from convtimenet.model import (MAGIC, CheckpointFormatError, CheckpointNameError,
                               CheckpointTruncatedError, CheckpointVersionError, ConfigError,
                               ModelConfig, dw_param_count, export_merged, init_model,
                               load_checkpoint, read_checkpoint_header, save_checkpoint,
                               state_tensors)
from convtimenet.numcore import ShapeError


def small(task="classify", **kw):
    base = dict(task=task, C=3, T=48, P=8, S=4, D=8, kernel_sizes=[7, 7, 13], num_classes=4, horizon=6)
    base.update(kw)
    return ModelConfig(**base)


def trained(cfg, seed=0):
    m = init_model(cfg)
    randomize(m, np.random.default_rng(seed), scale=0.1)
    for p in m.params():
        p.value[...] = p.value.astype(cfg.np_dtype)
    return m.eval()


# ----------------------------------------------------------------- config

def test_default_config_protocol_values():
    c = ModelConfig()
    assert (c.P, c.S, c.D, c.kernel_sizes, c.small_kernel, c.r) == (16, 8, 64, [7, 7, 13, 13, 19, 19], 5, 2)
    assert c.instance_norm is False
    assert ModelConfig(task="forecast").instance_norm is True


@pytest.mark.parametrize("field,value", [
    ("task", "regress"), ("P", 0), ("S", 20), ("predictor", "attention"), ("kernel_sizes", [4]),
    ("dropout", 1.0), ("num_classes", 1), ("head", "max"), ("dtype", "float16"),
])
def test_config_errors_name_the_field(field, value):
    with pytest.raises(ConfigError) as e:
        init_model(small(**{field: value}))
    assert e.value.field == field


def test_unknown_field_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"depth": 3})


def test_config_dict_roundtrip():
    c = small(predictor="mlp", learnable_residual=False)
    assert ModelConfig.from_dict(c.to_dict()) == c


# --------------------------------------------------------------- forward

def test_same_seed_same_parameters():
    a, b = init_model(ModelConfig()), init_model(ModelConfig())
    for (na, ta), (nb, tb) in zip(state_tensors(a).items(), state_tensors(b).items()):
        assert na == nb
        np.testing.assert_array_equal(ta, tb)
    c = init_model(ModelConfig(seed=1))
    assert not np.array_equal(a.head.weight.value, c.head.weight.value)


def test_init_alphas_zero_and_predictor_head_zero():
    m = init_model(ModelConfig())
    alphas = [p for n, p in m.named_params() if n.endswith("alpha")]
    assert len(alphas) == 12 and all(a.value[0] == 0 for a in alphas)
    assert not m.embedder.predictor.head.weight.value.any()


def test_plain_residual_removes_alphas():
    m = init_model(small(learnable_residual=False))
    assert not [n for n, _ in m.named_params() if n.endswith("alpha")]
    m = init_model(small(learnable_residual=True, ffn_learnable_residual=False))
    assert len([n for n, _ in m.named_params() if n.endswith("alpha")]) == 3


def test_output_shapes(rng):
    m = init_model(small(num_classes=4)).eval()
    assert m.forward(rng.standard_normal((2, 3, 48))).shape == (2, 4)
    f = init_model(ModelConfig(task="forecast", C=7, T=96, horizon=96)).eval()
    assert f.forward(rng.standard_normal((2, 7, 96))).shape == (2, 7, 96)


def test_input_shape_checked(rng):
    with pytest.raises(ShapeError):
        init_model(small()).forward(rng.standard_normal((2, 2, 48)))


def test_fresh_forecast_is_head_of_uniform_embedding(rng):
    cfg = small("forecast", instance_norm=False)
    m = init_model(cfg).eval()
    x = rng.standard_normal((3, 3, 48)).astype(np.float32)
    z = m.embedder.uniform_forward(x)
    ref = m.head.forward(z.reshape(3, -1)).reshape(3, 3, 6)
    np.testing.assert_array_equal(m.forward(x), ref)


def test_constant_channel_forecasts_its_level(rng):
    m = init_model(small("forecast")).eval()
    m.head.bias.value[...] = 0
    x = rng.standard_normal((2, 3, 48)).astype(np.float32)
    x[:, 1, :] = 4.5
    out = m.forward(x)
    # normalized channel is exactly 0, but the head mixes channels; only the
    # de-normalization is checked: scale ~1e-5 means the level dominates
    np.testing.assert_allclose(out[:, 1], 4.5, atol=1e-3)


@pytest.mark.parametrize("a,b", [(2.0, 3.0), (0.5, -10.0), (7.0, 0.0)])
def test_instance_norm_affine_equivariance(rng, a, b):
    m = trained(small("forecast", dtype="float64"))
    x = rng.standard_normal((4, 3, 48))
    y = m.forward(x)
    x2 = x.copy()
    x2[:, 1] = a * x[:, 1] + b
    y2 = m.forward(x2)
    # exact up to the 1e-5 std floor: the normalized input differs by O(1e-5/std)
    np.testing.assert_allclose(y2[:, 1], a * y[:, 1] + b, rtol=1e-4, atol=1e-4 * a)
    np.testing.assert_allclose(y2[:, [0, 2]], y[:, [0, 2]], rtol=1e-4, atol=1e-4)


def test_train_forward_seeded_dropout(rng):
    m = init_model(small(dropout=0.5))
    randomize(m, rng, 0.1)
    x = rng.standard_normal((4, 3, 48))
    np.testing.assert_array_equal(m.forward(x, seed=3), m.forward(x, seed=3))
    assert not np.array_equal(m.forward(x, seed=3), m.forward(x, seed=4))


def test_model_gradients():
    for name, rep in gradcheck_cmd("model"):
        assert rep.passed, f"{name}\n{rep.format()}"


def test_channel_independent_and_mean_head(rng):
    for task in ("classify", "forecast"):
        m = init_model(small(task, channel_independent=True, head="mean")).eval()
        out = m.forward(rng.standard_normal((2, 3, 48)))
        assert out.shape == m.output_shape(2)


def test_channel_independent_gradients(rng):
    from convtimenet.numcore import Param, grad_check
    m = randomize(init_model(tiny_model_config("forecast", channel_independent=True, head="mean")), rng, 0.2)
    x = Param(rng.standard_normal((3, 2, 64)))
    w = rng.standard_normal(m.output_shape(3))

    def f(backward=False):
        y = m.forward(x.value, seed=1)
        if backward:
            m.zero_grad()
            x.grad = m.backward(w)
        return float((y * w).sum())

    rep = grad_check(f, list(m.named_params()) + [("input", x)], max_coords=16, rng=rng)
    assert rep.passed, rep.format()


# ---------------------------------------------------------------- export

def test_export_matches_source(rng):
    m = trained(small())
    merged = export_merged(m)
    assert merged.merged and not m.merged
    x = rng.standard_normal((100, 3, 48)).astype(np.float32)
    a, b = m.forward(x), merged.forward(x)
    assert np.abs(a - b).max() <= 1e-5
    top2 = np.sort(a, axis=1)[:, -2:]
    keep = (top2[:, 1] - top2[:, 0]) > 1e-4
    np.testing.assert_array_equal(a.argmax(1)[keep], b.argmax(1)[keep])


def test_export_guards(rng):
    m = trained(small())
    with pytest.raises(MergeError):
        export_merged(m.train())
    merged = export_merged(m.eval())
    with pytest.raises(MergeError):
        export_merged(merged)
    with pytest.raises(MergeError):
        merged.train()


def test_merged_parameter_counts():
    m = init_model(small(D=8)).eval()
    merged = export_merged(m)
    for blk, mblk, k in zip(m.blocks, merged.blocks, [7, 7, 13]):
        assert dw_param_count(blk) == 8 * (k + 5) + 2 * 8
        assert dw_param_count(mblk) == 8 * k + 8


# ------------------------------------------------------------ checkpoints

@pytest.mark.parametrize("task", ["classify", "forecast"])
def test_checkpoint_roundtrip_bitwise(tmp_path, rng, task):
    m = trained(small(task))
    x = rng.standard_normal((5, 3, 48)).astype(np.float32)
    p = tmp_path / "m.ctn"
    save_checkpoint(m, p)
    m2 = load_checkpoint(p)
    np.testing.assert_array_equal(m.forward(x), m2.forward(x))
    save_checkpoint(m2, tmp_path / "again.ctn")
    assert (tmp_path / "again.ctn").read_bytes() == p.read_bytes()


def test_merged_checkpoint_loads_merged(tmp_path, rng):
    merged = export_merged(trained(small()))
    save_checkpoint(merged, tmp_path / "m.ctn")
    back = load_checkpoint(tmp_path / "m.ctn")
    assert back.merged
    x = rng.standard_normal((4, 3, 48)).astype(np.float32)
    np.testing.assert_array_equal(back.forward(x), merged.forward(x))


def test_checkpoint_header_layout(tmp_path):
    m = init_model(small())
    save_checkpoint(m, tmp_path / "m.ctn", extra={"epoch": 3})
    raw = (tmp_path / "m.ctn").read_bytes()
    assert raw[:4] == MAGIC
    (n,) = struct.unpack("<Q", raw[4:12])
    h = read_checkpoint_header(tmp_path / "m.ctn")
    assert h["format_version"] == 1 and h["extra"] == {"epoch": 3} and h["merged"] is False
    total = sum(t["nbytes"] for t in h["tensors"])
    assert len(raw) == 12 + n + total
    offsets = [t["offset"] for t in h["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


def _corrupt(path, fn):
    data = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(data)))


def test_checkpoint_error_kinds(tmp_path):
    m = init_model(small())
    p = tmp_path / "m.ctn"

    save_checkpoint(m, p)
    _corrupt(p, lambda d: b"XXXX" + d[4:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)

    save_checkpoint(m, p)
    _corrupt(p, lambda d: d[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(p)

    save_checkpoint(m, p)
    _corrupt(p, lambda d: d[:20])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(p)

    save_checkpoint(m, p)
    _corrupt(p, lambda d: d.replace(b'"format_version": 1', b'"format_version": 9'))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)

    save_checkpoint(m, p)
    _corrupt(p, lambda d: d.replace(b'"head.bias"', b'"head.bIas"'))
    with pytest.raises(CheckpointNameError):
        load_checkpoint(p)


def test_missing_checkpoint_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.ctn")
    assert not os.path.exists(tmp_path / "absent.ctn")
