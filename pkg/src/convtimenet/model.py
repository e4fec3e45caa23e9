"""End-to-end model: deformable patch embedding, block backbone, linear head.

Also owns the merged inference export and the ``CTN1`` checkpoint format::

    b"CTN1" | uint64 LE header length | UTF-8 JSON header | tensor payloads

The header carries the format version, the full model config, a ``merged``
flag and an ordered tensor directory (name, shape, dtype, byte offset into the
payload section, byte count). Payloads are raw little-endian IEEE-754 arrays.
"""
import copy
import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .depatch import VARIANTS, PatchEmbedder
from .fcblock import Block, MergeError, StagePlan, build_backbone, merge_branches
from .numcore import Dropout, Linear, Module, ShapeError

MAGIC = b"CTN1"
FORMAT_VERSION = 1
STD_FLOOR = 1e-5


class ConfigError(ValueError):
    """Invalid model or training configuration; ``field`` names the culprit."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointNameError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    task: str = "classify"
    C: int = 1
    T: int = 336
    P: int = 16
    S: int = 8
    predictor: str = "convconv"
    predictor_hidden: int = 0  # 0 -> D // 2
    predictor_kernel: int = 3
    D: int = 64
    kernel_sizes: list = field(default_factory=lambda: [7, 7, 13, 13, 19, 19])
    small_kernel: int = 5
    r: int = 2
    dropout: float = 0.2
    learnable_residual: bool = True
    ffn_learnable_residual: bool = None  # None -> same as learnable_residual
    instance_norm: bool = None  # None -> on for forecast, off for classify
    channel_independent: bool = False
    head: str = "flatten"
    num_classes: int = 2
    horizon: int = 96
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        if self.instance_norm is None:
            self.instance_norm = self.task == "forecast"
        if self.ffn_learnable_residual is None:
            self.ffn_learnable_residual = self.learnable_residual

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.task in ("classify", "forecast"), "task", f"must be classify or forecast, got {self.task!r}")
        for name in ("C", "T", "P", "S", "D", "r"):
            v = getattr(self, name)
            need(isinstance(v, (int, np.integer)) and v >= 1, name, f"must be a positive integer, got {v!r}")
        need(self.P <= self.T, "P", f"patch size {self.P} exceeds series length T={self.T}")
        need(self.S <= self.P, "S", f"stride {self.S} exceeds patch size P={self.P}")
        need(self.predictor in VARIANTS, "predictor", f"must be one of {VARIANTS}, got {self.predictor!r}")
        need(self.predictor_kernel >= 1 and self.predictor_kernel % 2 == 1, "predictor_kernel",
             f"must be a positive odd integer, got {self.predictor_kernel}")
        need(self.predictor_hidden >= 0, "predictor_hidden", "must be >= 0")
        try:
            StagePlan(tuple(self.kernel_sizes), self.small_kernel)
        except ShapeError as e:
            raise ConfigError("kernel_sizes", str(e)) from None
        need(0.0 <= self.dropout < 1.0, "dropout", f"must be in [0, 1), got {self.dropout}")
        need(self.head in ("flatten", "mean"), "head", f"must be flatten or mean, got {self.head!r}")
        need(self.dtype in ("float32", "float64"), "dtype", f"must be float32 or float64, got {self.dtype!r}")
        if self.task == "classify":
            need(self.num_classes >= 2, "num_classes", f"classification needs >= 2 classes, got {self.num_classes}")
        else:
            need(self.horizon >= 1, "horizon", f"forecasting needs horizon >= 1, got {self.horizon}")
        return self

    @property
    def plan(self):
        return StagePlan(tuple(self.kernel_sizes), self.small_kernel)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)


class Model(Module):
    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        dtype = cfg.np_dtype
        seq = np.random.SeedSequence(cfg.seed)
        main, pred, drop = (np.random.default_rng(s) for s in seq.spawn(3))
        c_embed = 1 if cfg.channel_independent else cfg.C
        self.embedder = PatchEmbedder(
            c_embed, cfg.T, cfg.P, cfg.S, cfg.D, cfg.predictor,
            hidden=cfg.predictor_hidden or None, kernel_size=cfg.predictor_kernel,
            rng=main, predictor_rng=pred, dtype=dtype,
        )
        self.blocks = build_backbone(
            cfg.plan, cfg.D, cfg.r, cfg.dropout, cfg.learnable_residual,
            cfg.ffn_learnable_residual, rng=main, dtype=dtype,
        )
        for m in self.modules():
            if hasattr(m, "seed_stats"):
                m.seed_stats()
        n = self.embedder.N
        feat = cfg.D * n if cfg.head == "flatten" else cfg.D
        if cfg.task == "classify":
            n_in = feat * (cfg.C if cfg.channel_independent else 1)
            self.head_drop = Dropout(cfg.dropout)
            self.head = Linear(n_in, cfg.num_classes, rng=main, dtype=dtype)
        else:
            n_out = cfg.horizon * (1 if cfg.channel_independent else cfg.C)
            self.head_drop = Dropout(0.0)
            self.head = Linear(feat, n_out, rng=main, dtype=dtype)
        self.merged = False
        self._dropout_rng = drop
        self._cache = None

    # ----------------------------------------------------------------- api

    @property
    def N(self):
        return self.embedder.N

    def output_shape(self, batch):
        c = self.cfg
        return (batch, c.num_classes) if c.task == "classify" else (batch, c.C, c.horizon)

    def train(self, mode=True):
        if mode and getattr(self, "merged", False):
            raise MergeError("merged models are inference-only and cannot be trained")
        return super().train(mode)

    def _reseed_dropout(self, seed):
        if seed is None:
            seed = int(self._dropout_rng.integers(2**63))
        layers = [m for m in self.modules() if isinstance(m, Dropout)]
        for i, layer in enumerate(layers):
            layer.seed = (seed, i)

    def forward(self, x, seed=None):
        """Logits (B, K) for classification, forecasts (B, C, H) otherwise.

        ``seed`` fixes the dropout masks of a train-mode pass; when omitted a
        fresh seed is drawn from the model's own generator.
        """
        cfg = self.cfg
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1:] != (cfg.C, cfg.T):
            raise ShapeError(f"model expects input (B, {cfg.C}, {cfg.T}), got {x.shape}")
        x = x.astype(cfg.np_dtype, copy=False)
        if self.training:
            self._reseed_dropout(seed)
        B = x.shape[0]
        stats = None
        if cfg.instance_norm:
            mean = x.mean(axis=2, keepdims=True)
            std = np.sqrt(((x - mean) ** 2).mean(axis=2, keepdims=True))
            denom = std + x.dtype.type(STD_FLOOR)
            xn = (x - mean) / denom
            stats = (x, mean, std, denom, xn)
            x = xn
        if cfg.channel_independent:
            x = x.reshape(B * cfg.C, 1, cfg.T)
        z = self.embedder.forward(x)
        for blk in self.blocks:
            z = blk.forward(z)
        zshape = z.shape
        f = z.reshape(z.shape[0], -1) if cfg.head == "flatten" else z.mean(axis=2)
        if cfg.task == "classify" and cfg.channel_independent:
            f = f.reshape(B, -1)
        out = self.head.forward(self.head_drop.forward(f))
        if cfg.task == "forecast":
            out = out.reshape(B, cfg.C, cfg.horizon)
            if stats is not None:
                pred_n = out
                out = pred_n * stats[3] + stats[1]
                stats = stats + (pred_n,)
        self._cache = (B, zshape, stats)
        return out

    def backward(self, gy):
        if self.merged:
            raise MergeError("merged models are inference-only")
        cfg = self.cfg
        B, zshape, stats = self._cache
        gx_stats = None
        if cfg.task == "forecast":
            if stats is not None:
                x, mean, std, denom, xn, pred_n = stats
                g_pred = gy * denom
                g_denom = (gy * pred_n).sum(axis=2, keepdims=True)
                g_mean = gy.sum(axis=2, keepdims=True)
                gy = g_pred
                gx_stats = (x, mean, std, denom, xn, g_denom, g_mean)
            gy = gy.reshape(B, -1) if not cfg.channel_independent else gy.reshape(B * cfg.C, cfg.horizon)
        gf = self.head_drop.backward(self.head.backward(gy))
        if cfg.task == "classify" and cfg.channel_independent:
            gf = gf.reshape(zshape[0], -1)
        if cfg.head == "flatten":
            gz = gf.reshape(zshape)
        else:
            gz = np.repeat(gf[:, :, None] / zshape[2], zshape[2], axis=2).astype(gf.dtype, copy=False)
        for blk in reversed(self.blocks):
            gz = blk.backward(gz)
        gx = self.embedder.backward(gz)
        if cfg.channel_independent:
            gx = gx.reshape(B, cfg.C, cfg.T)
        if gx_stats is not None:
            x, mean, std, denom, xn, g_denom, g_mean = gx_stats
            T = x.shape[2]
            gxn = gx
            g_mean = g_mean - (gxn / denom).sum(axis=2, keepdims=True)
            g_std = g_denom - (gxn * xn / denom).sum(axis=2, keepdims=True)
            safe = np.where(std > 0, std, 1)
            gx = gxn / denom + g_mean / T + np.where(std > 0, g_std / (T * safe), 0) * (x - mean)
        return gx

    def predict(self, x, batch_size=256):
        """Eval-mode forward in chunks; the model's mode is restored afterwards."""
        was = self.training
        if was:
            self.eval()
        try:
            outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        finally:
            if was:
                self.train()
        return np.concatenate(outs, axis=0)


def init_model(cfg):
    """Deterministic fresh model: residual scales 0, predictor head zeroed."""
    return Model(cfg)


def export_merged(model):
    """Copy of an eval-mode ``model`` with every block merged to one kernel."""
    if model.merged:
        raise MergeError("model is already merged")
    if model.training:
        raise MergeError("export requires eval mode")
    out = copy.deepcopy(model)
    out.blocks = [merge_branches(b) for b in out.blocks]
    out.merged = True
    out.training = False
    return out


def dw_param_count(block):
    """Parameter count of a block's depthwise sublayer (convs and norms' affine terms excluded)."""
    if isinstance(block, Block):
        return sum(c.weight.value.size + c.bias.value.size for c in (block.conv_large, block.conv_small))
    return block.conv.weight.value.size + block.conv.bias.value.size


# ------------------------------------------------------------ checkpoint

def state_tensors(model):
    """Ordered ``name -> array`` of every parameter and running statistic."""
    out = {name: p.value for name, p in model.named_params()}
    for name, buf in model.named_buffers():
        out[name] = buf
    return out


def save_checkpoint(model, path, extra=None):
    tensors = state_tensors(model)
    directory, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = a.tobytes()
        directory.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                          "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "merged": bool(model.merged),
        "tensors": directory,
        "extra": extra or {},
    }
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for raw in payloads:
            fh.write(raw)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return _parse(data)[0]


def _parse(data):
    if len(data) < len(MAGIC) or data[:4] != MAGIC:
        raise CheckpointFormatError("not a CTN1 checkpoint (bad magic bytes)")
    if len(data) < 12:
        raise CheckpointTruncatedError("file ends inside the header length field")
    (hlen,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + hlen:
        raise CheckpointTruncatedError(f"header declares {hlen} bytes but file is shorter")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"header is not valid UTF-8 JSON: {e}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    return header, memoryview(data)[12 + hlen:]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    header, payload = _parse(data)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except ConfigError as e:
        raise CheckpointFormatError(f"bad config in checkpoint: {e}") from None
    model = init_model(cfg)
    if header.get("merged"):
        model = export_merged(model.eval())
    expected = state_tensors(model)
    names = [t["name"] for t in header["tensors"]]
    if set(names) != set(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointNameError(f"tensor names do not match the model (missing {missing[:3]}, unexpected {extra[:3]})")
    params = dict(model.named_params())
    bn_owner = {}
    for m_name, m in _named_modules(model):
        for b in m._buffers:
            bn_owner[f"{m_name}{b}"] = (m, b)
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointTruncatedError(f"payload for {t['name']} extends past end of file")
        arr = np.frombuffer(payload[t["offset"]:end], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        if arr.shape != expected[t["name"]].shape:
            raise CheckpointNameError(f"{t['name']}: shape {arr.shape} does not match model {expected[t['name']].shape}")
        if t["name"] in params:
            params[t["name"]].value = arr
            params[t["name"]].grad = np.zeros_like(arr)
        else:
            m, b = bn_owner[t["name"]]
            setattr(m, b, arr)
    return model.eval()


def _named_modules(module, prefix=""):
    yield prefix, module
    for name, child in module._children():
        yield from _named_modules(child, f"{prefix}{name}.")
