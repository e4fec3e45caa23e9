"""Training, evaluation, benchmarking and gradient-check orchestration."""
import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import datakit, kernels
from .fcblock import Block
from .depatch import VARIANTS, PatchEmbedder
from .model import (ConfigError, ModelConfig, _named_modules, export_merged, init_model,
                    load_checkpoint, save_checkpoint, state_tensors)
from .numcore import (AdamState, BatchNorm1d, Conv1d, Linear, Module, Param, ScaledResidual, ShapeError,
                      adam_step, dropout, dropout_backward, gelu, gelu_backward, grad_check)

log = logging.getLogger(__name__)

EPOCHS = {"classify": 200, "forecast": 10}
BEST_CHECKPOINT = "best.ctn"
REPORT_FILE = "report.json"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 0  # 0 -> 200 for classify, 10 for forecast
    lr: float = 1e-4
    batch_size: int = 32
    patience: int = 3
    early_stopping: bool = None  # None -> on for forecast only
    seed: int = 0
    train_path: str = ""
    test_path: str = ""
    data_path: str = ""
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    val_fraction: float = 0.2
    test_fraction: float = 0.25
    infer_shapes: bool = True
    out_dir: str = ""

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.early_stopping is None:
            self.early_stopping = self.task == "forecast"
        if not self.epochs:
            self.epochs = EPOCHS[self.task]

    @property
    def task(self):
        return self.model.task

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError("lr", f"must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.patience < 0:
            raise ConfigError("patience", f"must be >= 0, got {self.patience}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction", f"must be in (0, 1), got {self.val_fraction}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = dict(d.pop("model", {}) or {})
        names = {f.name for f in dataclasses.fields(cls)}
        model_names = {f.name for f in dataclasses.fields(ModelConfig)}
        top = {}
        for key, val in d.items():
            if key.startswith("model."):
                model[key[6:]] = val
            elif key in names:
                top[key] = val
            elif key in model_names:
                model[key] = val
            else:
                raise ConfigError(key, "unknown config field")
        return cls(model=ModelConfig.from_dict(model), **top)


@dataclass
class EarlyStopState:
    patience: int
    best: float = float("inf")
    since: int = 0
    best_epoch: int = 0

    def update(self, epoch, val_loss):
        """Record an epoch; returns True when this epoch is the new best."""
        if val_loss < self.best:
            self.best, self.since, self.best_epoch = val_loss, 0, epoch
            return True
        self.since += 1
        return False

    @property
    def should_stop(self):
        return self.since > self.patience


@dataclass
class RunReport:
    task: str
    seed: int
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    test_metrics: dict = field(default_factory=dict)
    val_metrics: dict = field(default_factory=dict)
    checkpoint: str = ""
    backend: str = ""
    sample_forecast: dict = None

    @property
    def train_losses(self):
        return [e["train_loss"] for e in self.epochs]

    @property
    def val_losses(self):
        return [e["val_loss"] for e in self.epochs]

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


# -------------------------------------------------------------------- data

@dataclass
class Splits:
    """Arrays ready for the model: ``X`` (n, C, T) and targets per split."""

    task: str
    train: tuple
    val: tuple
    test: tuple
    scaler: datakit.Scaler = None
    K: int = 0

    def get(self, name):
        return getattr(self, name)


def classification_splits(train, test=None, val_fraction=0.2, test_fraction=0.25, seed=0):
    """Stratified seeded validation (and, without a test set, test) carve-outs."""
    if test is None:
        keep, held = datakit.stratified_split(train.y, test_fraction, seed=(seed, 1))
        train, test = train.subset(keep), train.subset(held)
    keep, held = datakit.stratified_split(train.y, val_fraction, seed=(seed, 2))
    tr, va = train.subset(keep), train.subset(held)
    return Splits("classify", (tr.X, tr.y), (va.X, va.y), (test.X, test.y), K=train.K)


def forecast_splits(ds, T, H, ratios=(0.7, 0.1, 0.2)):
    train, val, test = datakit.chrono_split(ds, ratios, min_length=T + H)
    scaler = datakit.fit_scaler(train)
    out = [datakit.make_windows(scaler.transform(part), T, H) for part in (train, val, test)]
    return Splits("forecast", *out, scaler=scaler)


def load_splits(cfg):
    m = cfg.model
    if cfg.task == "classify":
        if not cfg.train_path:
            raise ConfigError("train_path", "classification needs a training file")
        train = datakit.load_classification_file(cfg.train_path)
        test = datakit.load_classification_file(cfg.test_path) if cfg.test_path else None
        if test is not None and (test.C, test.T, test.K) != (train.C, train.T, train.K):
            raise datakit.DataError("train and test files disagree on channels/length/classes")
        return classification_splits(train, test, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    if not cfg.data_path:
        raise ConfigError("data_path", "forecasting needs a CSV file")
    ds = datakit.load_forecast_csv(cfg.data_path)
    return forecast_splits(ds, m.T, m.horizon, tuple(cfg.split))


def _fit_shapes(cfg, splits):
    X = splits.train[0]
    m = cfg.model
    if cfg.infer_shapes:
        m.C = X.shape[1]
        if cfg.task == "classify":
            m.T = X.shape[2]
            m.num_classes = splits.K
    if (m.C, m.T) != X.shape[1:]:
        raise ConfigError("C" if m.C != X.shape[1] else "T",
                          f"model expects (C, T) = ({m.C}, {m.T}) but data is {X.shape[1:]}")
    if cfg.task == "classify" and m.num_classes != splits.K:
        raise ConfigError("num_classes", f"model has {m.num_classes} classes, data has {splits.K}")
    m.validate()


# --------------------------------------------------------------- training

def batch_loss(model, task, x, y):
    out = model.forward(x)
    if task == "classify":
        return datakit.cross_entropy(out, y)
    return datakit.mse_loss(out, y.astype(out.dtype, copy=False))


def eval_loss(model, task, X, Y, batch_size=256):
    """Sample-weighted mean loss over every sample (partial batches kept)."""
    total, n = 0.0, 0
    for i in range(0, len(X), batch_size):
        out = model.forward(X[i:i + batch_size])
        y = Y[i:i + batch_size]
        if task == "classify":
            loss, _ = datakit.cross_entropy(out, y)
        else:
            loss, _ = datakit.mse_loss(out, y.astype(out.dtype, copy=False))
        total += loss * len(y)
        n += len(y)
    return total / n


def compute_metrics(model, splits, name, batch_size=256):
    """Eval-mode metrics of ``model`` on one split; deterministic."""
    was = model.training
    if was:
        model.eval()
    try:
        X, Y = splits.get(name)
        pred = model.predict(X, batch_size)
        if splits.task == "classify":
            loss, _ = datakit.cross_entropy(pred, Y)
            return {"loss": loss, "accuracy": datakit.accuracy(pred, Y),
                    "macro_f1": datakit.macro_f1(pred, Y, K=splits.K)}
        p = pred.astype(np.float64)
        y = Y.astype(np.float64)
        s = splits.scaler
        raw_p = p * s.std[None, :, None] + s.mean[None, :, None]
        raw_y = y * s.std[None, :, None] + s.mean[None, :, None]
        return {"mse": datakit.mse(raw_p, raw_y), "mae": datakit.mae(raw_p, raw_y),
                "mse_scaled": datakit.mse(p, y), "mae_scaled": datakit.mae(p, y)}
    finally:
        if was:
            model.train()


def persistence_mse(splits, name="test"):
    """MSE (scaled) of repeating the last observed value over the horizon."""
    X, Y = splits.get(name)
    return datakit.mse(np.repeat(X[:, :, -1:], Y.shape[2], axis=2), Y)


def train(cfg, splits=None):
    """Train per ``cfg``; returns the :class:`RunReport`.

    ``splits`` bypasses file loading (used by tests and the acceptance suite).
    Config and data problems are raised before the first epoch. The best
    model rides along as ``report.model``; it is not serialized.
    """
    cfg = copy.deepcopy(cfg).validate()
    if splits is None:
        splits = load_splits(cfg)
    _fit_shapes(cfg, splits)
    task = cfg.task
    Xtr, Ytr = splits.train
    Xva, Yva = splits.val
    if len(Xva) == 0:
        raise datakit.DataError("validation split is empty")

    model = init_model(cfg.model).train()
    params = model.params()
    opt = AdamState(lr=cfg.lr)
    stopper = EarlyStopState(cfg.patience)
    report = RunReport(task, cfg.seed, cfg.to_dict(), backend=kernels.backend())
    best_state = None
    ckpt = ""
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        ckpt = os.path.join(cfg.out_dir, BEST_CHECKPOINT)

    n = len(Xtr)
    bs = min(cfg.batch_size, n)
    n_batches = max(1, n // bs)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            loss, grad = batch_loss(model, task, Xtr[idx], Ytr[idx])
            model.zero_grad()
            model.backward(grad)
            adam_step(params, opt)
            losses.append(loss)
        model.eval()
        # Dropout-free loss on the whole training split; unlike the running
        # mean above it is not confounded by batch order and dropout masks.
        train_eval = eval_loss(model, task, Xtr, Ytr)
        val_loss = eval_loss(model, task, Xva, Yva)
        improved = stopper.update(epoch, val_loss)
        if improved:
            if ckpt:
                save_checkpoint(model, ckpt, extra={"epoch": epoch, "val_loss": val_loss})
            else:
                best_state = {k: v.copy() for k, v in state_tensors(model).items()}
        model.train()
        report.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                              "train_eval_loss": float(train_eval), "val_loss": float(val_loss),
                              "seconds": time.perf_counter() - t0})
        log.info("epoch %d train %.6f val %.6f", epoch, np.mean(losses), val_loss)
        if cfg.early_stopping and stopper.should_stop:
            report.stopped_early = True
            break

    report.best_epoch = stopper.best_epoch
    if ckpt:
        best = load_checkpoint(ckpt)
        report.checkpoint = ckpt
    else:
        best = model.eval()
        _restore(best, best_state)
    report.test_metrics = compute_metrics(best, splits, "test")
    report.val_metrics = compute_metrics(best, splits, "val")
    if task == "forecast":
        report.test_metrics["persistence_mse_scaled"] = persistence_mse(splits)
        report.sample_forecast = _sample_forecast(best, splits)
    if cfg.out_dir:
        report.save(os.path.join(cfg.out_dir, REPORT_FILE))
    report.model = best
    return report


def _restore(model, state):
    params = dict(model.named_params())
    for name, value in state.items():
        if name in params:
            params[name].value[...] = value
    owners = {}
    for m_name, m in _named_modules(model):
        for b in m._buffers:
            owners[m_name + b] = (m, b)
    for name, value in state.items():
        if name in owners:
            m, b = owners[name]
            setattr(m, b, value.copy())


def _sample_forecast(model, splits):
    X, Y = splits.test
    pred = model.predict(X[:1])
    return {"input": X[0].tolist(), "truth": Y[0].tolist(), "prediction": pred[0].astype(float).tolist()}


# ------------------------------------------------------------- evaluation

def evaluate(checkpoint_path, splits, split="test"):
    """Metrics of a saved checkpoint on ``split`` of ``splits``."""
    model = load_checkpoint(checkpoint_path)
    X = splits.get(split)[0]
    cfg = model.cfg
    if splits.task != cfg.task:
        raise ConfigError("task", f"checkpoint is a {cfg.task} model, data is for {splits.task}")
    if X.shape[1:] != (cfg.C, cfg.T):
        raise ShapeError(f"checkpoint expects (C, T) = ({cfg.C}, {cfg.T}), data has {X.shape[1:]}")
    return compute_metrics(model, splits, split)


# -------------------------------------------------------------- benchmark

def _time_forward(model, inputs, warmup, repeats):
    for i in range(warmup):
        model.forward(inputs[i % len(inputs)])
    times = []
    for i in range(repeats):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        model.forward(x)
        times.append(time.perf_counter() - t0)
    t = np.array(times) * 1e3
    return {"median_ms": float(np.median(t)), "p95_ms": float(np.percentile(t, 95)),
            "mean_ms": float(t.mean()), "repeats": repeats}


def bench(checkpoint_path=None, batch=32, repeats=50, warmup=5, seed=0, model=None, backends=None):
    """Eval-mode forward latency of the dual-branch and merged forms.

    Both forms see the same seeded input batches. With ``backends`` (e.g.
    ``["python", "cython"]``) every form is timed under each kernel backend.
    """
    if model is None:
        model = load_checkpoint(checkpoint_path) if checkpoint_path else init_model(ModelConfig())
    model.eval()
    merged = model if model.merged else export_merged(model)
    dual = None if model.merged else model
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    inputs = [rng.standard_normal((batch, cfg.C, cfg.T)).astype(cfg.np_dtype) for _ in range(4)]
    previous = kernels.backend()
    digest = hashlib.sha256(b"".join(x.tobytes() for x in inputs)).hexdigest()
    report = {"batch": batch, "repeats": repeats, "warmup": warmup, "seed": seed, "inputs_sha256": digest,
              "config": {"kernel_sizes": cfg.kernel_sizes, "D": cfg.D, "T": cfg.T, "C": cfg.C},
              "forms": {}}
    try:
        for be in backends or [previous]:
            kernels.set_backend(be)
            key = be if backends else None
            forms = {}
            if dual is not None:
                forms["dual"] = _time_forward(dual, inputs, warmup, repeats)
            forms["merged"] = _time_forward(merged, inputs, warmup, repeats)
            if key is None:
                report["forms"] = forms
                report["backend"] = be
            else:
                report["forms"][key] = forms
    finally:
        kernels.set_backend(previous)
    return report


# -------------------------------------------------------------- gradcheck

def randomize(module, rng, scale=0.3):
    """Move every parameter (and running statistic) to a generic point."""
    for _, p in module.named_params():
        p.value += rng.normal(0, scale, p.shape).astype(p.value.dtype)
    for m in module.modules():
        if isinstance(m, BatchNorm1d):
            m.running_mean = rng.normal(0, 0.5, m.channels)
            m.running_var = rng.uniform(0.5, 2.0, m.channels)
    return module


def _check_module(name, module, x, rng, backward=None, forward=None, max_coords=48, tol=1e-4):
    forward = forward or module.forward
    backward = backward or module.backward
    xp = Param(np.array(x, dtype=np.float64))
    out = forward(xp.value)
    w = rng.normal(size=out.shape)

    def f(backward_pass=False):
        y = forward(xp.value)
        loss = float((y * w).sum())
        if backward_pass:
            module.zero_grad()
            xp.grad = backward(w)
        return loss

    report = grad_check(lambda backward=False: f(backward), list(module.named_params()) + [("input", xp)],
                        max_coords=max_coords, rng=rng, tol=tol)
    return name, report


class _Fn(Module):
    """Adapter that exposes a forward/backward function pair as a module."""

    def __init__(self, fwd, bwd, **params):
        for k, v in params.items():
            setattr(self, k, v)
        self._fwd, self._bwd = fwd, bwd

    def forward(self, x):
        return self._fwd(self, x)

    def backward(self, g):
        return self._bwd(self, g)


def _layer_checks(rng):
    f64 = np.float64
    out = []
    for groups, cin, cout, k in ((1, 3, 4, 3), (4, 4, 4, 7), (2, 4, 6, 5), (1, 3, 5, 1)):
        conv = Conv1d(cin, cout, k, groups=groups, rng=rng, dtype=f64)
        conv.bias.value[...] = rng.normal(size=cout)
        out.append(_check_module(f"conv1d(groups={groups}, k={k})", conv, rng.normal(size=(2, cin, 11)), rng))
    bn = BatchNorm1d(3, dtype=f64)
    randomize(bn, rng)
    out.append(_check_module("batchnorm(train)", bn, rng.normal(size=(4, 3, 5)), rng))
    bn_e = randomize(BatchNorm1d(3, dtype=f64), rng).eval()
    out.append(_check_module("batchnorm(eval)", bn_e, rng.normal(size=(4, 3, 5)), rng))
    gl = _Fn(lambda s, x: (setattr(s, "x", x), gelu(x))[1], lambda s, g: gelu_backward(s.x, g))
    out.append(_check_module("gelu", gl, rng.normal(0, 2, size=(3, 7)), rng))
    lin = Linear(5, 4, rng=rng, dtype=f64)
    lin.bias.value[...] = rng.normal(size=4)
    out.append(_check_module("linear", lin, rng.normal(size=(6, 5)), rng))
    dr = _Fn(lambda s, x: (setattr(s, "m", dropout(x, 0.3, True, 7)[1]), x * s.m)[1],
             lambda s, g: dropout_backward(g, s.m))
    out.append(_check_module("dropout(p=0.3)", dr, rng.normal(size=(4, 6)), rng))
    res = ScaledResidual(True, f64)
    res.alpha.value[...] = 0.7
    branch = rng.normal(size=(2, 3, 4))
    out.append(_check_module(
        "add_scaled", res, rng.normal(size=(2, 3, 4)), rng,
        forward=lambda x: res.forward(x, branch * x),
        backward=lambda g: (lambda gb: gb[0] + gb[1] * branch)(res.backward(g)),
    ))
    return out


def _depatch_checks(rng):
    out = []
    for variant in VARIANTS:
        emb = PatchEmbedder(2, 32, 8, 4, 6, variant, rng=rng, dtype=np.float64)
        randomize(emb, rng)
        out.append(_check_module(f"embed_forward({variant})", emb, rng.normal(size=(3, 2, 32)), rng))
    return out


def _block_checks(rng):
    out = []
    for learnable in (True, False):
        blk = Block(6, 9, 3, 2, dropout=0.2, learnable_residual=learnable, rng=rng, dtype=np.float64)
        randomize(blk, rng)
        blk.ffn.drop.seed = 11
        out.append(_check_module(f"block(learnable_residual={learnable})", blk,
                                 rng.normal(size=(3, 6, 12)), rng))
    return out


def tiny_model_config(task="classify", **kw):
    base = dict(task=task, C=2, T=64, P=16, S=8, D=8, kernel_sizes=[7, 13], r=2,
                num_classes=3, horizon=12, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def _model_checks(rng):
    out = []
    for task in ("classify", "forecast"):
        m = randomize(init_model(tiny_model_config(task)), rng, scale=0.2).train()
        out.append(_check_module(
            f"model({task})", m, rng.normal(size=(4, 2, 64)), rng,
            forward=lambda x, m=m: m.forward(x, seed=5), max_coords=32,
        ))
    return out


SCOPES = {"layer": _layer_checks, "depatch": _depatch_checks, "block": _block_checks, "model": _model_checks}


def gradcheck_cmd(scope="layer", seed=0):
    """Run finite-difference checks for one scope (or ``all``).

    Returns a list of ``(component, GradCheckReport)``; every report must pass
    at relative error 1e-4.
    """
    rng = np.random.default_rng(seed)
    scopes = list(SCOPES) if scope == "all" else [scope]
    results = []
    for s in scopes:
        if s not in SCOPES:
            raise ConfigError("scope", f"unknown gradcheck scope {s!r}; expected one of {sorted(SCOPES)} or all")
        results.extend(SCOPES[s](rng))
    return results
