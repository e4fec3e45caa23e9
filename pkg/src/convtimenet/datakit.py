"""Datasets, windowing, scaling, synthetic fixtures and metrics."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

SCALER_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed or unusable data; ``row``/``column`` locate it when known."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row, self.column = row, column


class EmptyFileError(DataError):
    pass


class RaggedRowError(DataError):
    pass


class NonNumericError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class ValueCountError(DataError):
    pass


# ---------------------------------------------------------------- forecast

@dataclass
class ForecastDataset:
    values: np.ndarray  # (T_total, C)
    channels: list = field(default_factory=list)

    def __len__(self):
        return self.values.shape[0]

    @property
    def C(self):
        return self.values.shape[1]


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_forecast_csv(path):
    """Read a header-first CSV; a non-numeric first column is dropped as a timestamp."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyFileError(f"{path}: file is empty")
    header, body = rows[0], rows[1:]
    if not body:
        raise EmptyFileError(f"{path}: header present but no data rows")
    skip_first = not _is_number(body[0][0])
    names = header[1:] if skip_first else header
    width = len(header)
    out = np.empty((len(body), width - int(skip_first)), dtype=np.float64)
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != width:
            raise RaggedRowError(f"{path}: expected {width} fields, got {len(row)}", row=line)
        cells = row[1:] if skip_first else row
        for j, cell in enumerate(cells):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise NonNumericError(f"{path}: non-numeric value {cell!r}", row=line,
                                      column=j + 1 + int(skip_first)) from None
    return ForecastDataset(out, [n.strip() for n in names])


def write_forecast_csv(path, values, channels=None, timestamps=True):
    values = np.asarray(values)
    channels = channels or [f"ch{i}" for i in range(values.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if timestamps else []) + list(channels))
        for t, row in enumerate(values):
            w.writerow(([f"t{t}"] if timestamps else []) + [repr(float(v)) for v in row])


def chrono_split(ds, ratios=(0.7, 0.1, 0.2), min_length=1):
    """Contiguous train/val/test segments in time order.

    Segment lengths are ``int(n * ratio)`` for train and val; test takes the rest.
    """
    values = ds.values if isinstance(ds, ForecastDataset) else np.asarray(ds)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    n = values.shape[0]
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    parts = (values[:n_train], values[n_train:n_train + n_val], values[n_train + n_val:])
    for name, part in zip(("train", "val", "test"), parts):
        if part.shape[0] < min_length:
            raise DataError(f"{name} segment has {part.shape[0]} rows, needs at least {min_length}")
    return parts


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean


def fit_scaler(train):
    """Per-channel z-score on (T, C) training rows, biased std floored at 1e-8."""
    train = np.asarray(train, dtype=np.float64)
    return Scaler(train.mean(axis=0), np.maximum(train.std(axis=0), SCALER_FLOOR))


def apply_scaler(scaler, x):
    return scaler.transform(x)


def make_windows(split, T, H):
    """Stride-1 windows of a (len, C) split as arrays ``(inputs, targets)``.

    ``inputs`` is (W, C, T) and ``targets`` (W, C, H) with W = len - T - H + 1.
    """
    split = np.asarray(split)
    n = split.shape[0]
    if n < T + H:
        raise DataError(f"split of length {n} is shorter than lookback + horizon = {T + H}")
    win = np.lib.stride_tricks.sliding_window_view(split, T + H, axis=0)  # W, C, T+H
    return np.ascontiguousarray(win[:, :, :T]), np.ascontiguousarray(win[:, :, T:])


# ---------------------------------------------------------- classification

@dataclass
class LabeledDataset:
    X: np.ndarray  # (n, C, T)
    y: np.ndarray  # (n,)
    K: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3 or self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"samples {self.X.shape} and labels {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.K):
            raise LabelRangeError(f"labels must lie in [0, {self.K})")

    def __len__(self):
        return self.X.shape[0]

    @property
    def C(self):
        return self.X.shape[1]

    @property
    def T(self):
        return self.X.shape[2]

    def subset(self, idx):
        return LabeledDataset(self.X[idx], self.y[idx], self.K)


def _parse_header(line, path):
    fields = {}
    for tok in line.split():
        key, _, val = tok.partition("=")
        fields[key] = val
    try:
        return int(fields["channels"]), int(fields["length"]), int(fields["classes"])
    except (KeyError, ValueError):
        raise DataError(f"{path}: header must be 'channels=C length=T classes=K', got {line!r}", row=1) from None


def load_classification_file(path):
    with open(path, encoding="utf-8") as fh:
        lines = [(i + 1, ln.strip()) for i, ln in enumerate(fh)]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines:
        raise EmptyFileError(f"{path}: file is empty")
    C, T, K = _parse_header(lines[0][1], path)
    body = lines[1:]
    if len(body) % (C + 1):
        raise DataError(f"{path}: {len(body)} data lines is not a multiple of 1 + channels = {C + 1}")
    xs, ys = [], []
    for s in range(0, len(body), C + 1):
        row, label_line = body[s]
        if not label_line.startswith("label="):
            raise DataError(f"{path}: expected 'label=<int>', got {label_line!r}", row=row)
        try:
            label = int(label_line[6:])
        except ValueError:
            raise DataError(f"{path}: label is not an integer: {label_line!r}", row=row) from None
        if not 0 <= label < K:
            raise LabelRangeError(f"{path}: label {label} outside [0, {K})", row=row)
        sample = np.empty((C, T))
        for c in range(C):
            row, text = body[s + 1 + c]
            parts = text.split(",")
            if len(parts) != T:
                raise ValueCountError(f"{path}: channel line has {len(parts)} values, expected {T}", row=row)
            try:
                sample[c] = [float(v) for v in parts]
            except ValueError:
                raise NonNumericError(f"{path}: non-numeric value in channel line", row=row) from None
        xs.append(sample)
        ys.append(label)
    X = np.stack(xs) if xs else np.empty((0, C, T))
    return LabeledDataset(X, np.array(ys, dtype=np.int64), K)


def write_classification_file(path, ds):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"channels={ds.C} length={ds.T} classes={ds.K}\n")
        for x, y in zip(ds.X, ds.y):
            fh.write(f"label={int(y)}\n")
            for row in x:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def stratified_split(y, fraction, seed):
    """Indices ``(keep, held)`` with ``fraction`` of each class held out."""
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for k in np.unique(y):
        idx = np.flatnonzero(y == k)
        rng.shuffle(idx)
        n_held = int(round(len(idx) * fraction))
        held.extend(idx[:n_held])
        keep.extend(idx[n_held:])
    return np.sort(np.array(keep, dtype=np.int64)), np.sort(np.array(held, dtype=np.int64))


# ---------------------------------------------------------------- synthetic

FREQ3_PERIODS = (8, 16, 32)
VARWIDTH_RANGES = ((5, 9), (15, 25))


def synth_classification(kind, n, seed=0, T=128):
    """Seeded fixture datasets.

    ``freq3``: one channel, three classes of sinusoids with periods 8/16/32,
    random phase and N(0, 0.1) noise. ``varwidth``: two classes of a single
    Gaussian-shaped bump at a random position whose full width is drawn from
    [5, 9] (class 0) or [15, 25] (class 1); the drawn widths are kept in
    ``meta["widths"]``.
    """
    if n < 30:
        raise DataError(f"synthetic datasets need n >= 30, got {n}")
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    if kind == "freq3":
        y = np.arange(n) % 3
        rng.shuffle(y)
        X = np.empty((n, 1, T))
        for i, k in enumerate(y):
            phase = rng.uniform(0, 2 * np.pi)
            X[i, 0] = np.sin(2 * np.pi * t / FREQ3_PERIODS[k] + phase) + rng.normal(0, 0.1, T)
        return LabeledDataset(X, y, 3)
    if kind == "varwidth":
        y = np.arange(n) % 2
        rng.shuffle(y)
        X = np.empty((n, 1, T))
        widths = np.empty(n, dtype=np.int64)
        for i, k in enumerate(y):
            lo, hi = VARWIDTH_RANGES[k]
            w = int(rng.integers(lo, hi + 1))
            center = rng.uniform(w, T - w)
            sigma = w / 4.0
            X[i, 0] = np.exp(-0.5 * ((t - center) / sigma) ** 2) + rng.normal(0, 0.05, T)
            widths[i] = w
        return LabeledDataset(X, y, 2, meta={"widths": widths})
    raise DataError(f"unknown synthetic kind {kind!r}; expected freq3 or varwidth")


def synth_forecast(T_total=2000, C=2, seed=0, periods=((24, 60), (36, 90)), noise=0.0):
    """Sum-of-two-sinusoids series per channel, (T_total, C)."""
    rng = np.random.default_rng(seed)
    t = np.arange(T_total, dtype=np.float64)
    out = np.empty((T_total, C))
    for c in range(C):
        p1, p2 = periods[c % len(periods)]
        ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
        out[:, c] = np.sin(2 * np.pi * t / p1 + ph1) + 0.5 * np.sin(2 * np.pi * t / p2 + ph2)
    if noise:
        out += rng.normal(0, noise, out.shape)
    return ForecastDataset(out, [f"s{c}" for c in range(C)])


# ------------------------------------------------------------------ metrics

def _check(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise ValueError("metrics need non-empty inputs")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(pred, target):
    pred, target = _check(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred, target):
    pred, target = _check(pred, target)
    return float(np.mean(np.abs(pred - target)))


def _labels(pred):
    pred = np.asarray(pred)
    return pred.argmax(axis=-1) if pred.ndim == 2 else pred


def accuracy(pred, target):
    """``pred`` is labels (n,) or scores (n, K); ``target`` is labels."""
    p, t = _check(_labels(pred), target)
    return float(np.mean(p == t))


def macro_f1(pred, target, K=None):
    p, t = _check(_labels(pred), target)
    K = K or int(max(p.max(), t.max())) + 1
    f1s = []
    for k in range(K):
        tp = np.sum((p == k) & (t == k))
        fp = np.sum((p == k) & (t != k))
        fn = np.sum((p != k) & (t == k))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(f1s))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype, copy=False)


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(pred.dtype, copy=False)
