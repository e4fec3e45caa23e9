"""``convtimenet`` command line.

Exit codes: 0 success, 1 validation failure, 2 config error, 3 I/O error.
Training settings come from an optional JSON file (``--config``) and any
number of ``--key=value`` flags, which win over the file. Model fields may be
given bare (``--D=32``) or qualified (``--model.D=32``).
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import datakit, harness, kernels
from .fcblock import MergeError
from .model import (CheckpointError, ConfigError, export_merged, load_checkpoint,
                    read_checkpoint_header, save_checkpoint)

OK, VALIDATION_FAILED, CONFIG_ERROR, IO_ERROR = 0, 1, 2, 3

# ------------------------------------------------------------------ config

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items):
    """``["--a=1", "--model.D=32"]`` -> ``{"a": 1, "model.D": 32}``."""
    out = {}
    for item in items:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(item, "overrides must look like --key=value")
        key, value = item[2:].split("=", 1)
        out[key.replace("-", "_") if not key.startswith("model.") else key] = _parse_value(value)
    return out


def load_config(path=None, overrides=None):
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a JSON object")
    model = dict(raw.pop("model", {}) or {})
    for key, value in (overrides or {}).items():
        if key.startswith("model."):
            model[key[6:]] = value
        else:
            raw[key] = value
    raw["model"] = model
    return harness.TrainConfig.from_dict(raw).validate()


# ---------------------------------------------------------------- commands

def cmd_train(args, overrides):
    cfg = load_config(args.config, overrides)
    if args.out:
        cfg.out_dir = args.out
    if not cfg.out_dir:
        raise ConfigError("out_dir", "train needs an output directory (--out)")
    report = harness.train(cfg)
    print(json.dumps({"checkpoint": report.checkpoint, "best_epoch": report.best_epoch,
                      "epochs_run": len(report.epochs), "test": report.test_metrics}, indent=2))
    return OK


def cmd_eval(args, overrides):
    header = read_checkpoint_header(args.checkpoint)
    cfg = load_config(args.config, overrides)
    cfg.model = harness.ModelConfig.from_dict(header["config"])
    cfg.infer_shapes = False
    splits = harness.load_splits(cfg)
    metrics = harness.evaluate(args.checkpoint, splits, args.split)
    print(json.dumps(metrics, indent=2))
    return OK


def cmd_export(args, overrides):
    model = load_checkpoint(args.checkpoint)
    merged = export_merged(model)
    save_checkpoint(merged, args.out, extra={"source": os.path.basename(args.checkpoint)})
    print(f"wrote merged checkpoint {args.out}")
    return OK


def cmd_bench(args, overrides):
    model = None
    if not args.checkpoint:
        cfg = load_config(args.config, overrides)
        model = harness.init_model(cfg.model)
    backends = args.backends.split(",") if args.backends else None
    report = harness.bench(args.checkpoint, args.batch, args.repeats, args.warmup, args.seed,
                           model=model, backends=backends)
    print(json.dumps(report, indent=2))
    return OK


def cmd_gradcheck(args, overrides):
    results = harness.gradcheck_cmd(args.scope, args.seed)
    ok = True
    for name, rep in results:
        w = rep.worst()
        status = "PASS" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{status} {name}: max rel err {rep.max_rel_err:.2e} "
              f"(worst {w.name}{[int(i) for i in w.worst_index]} analytic {w.analytic:.6g} numeric {w.numeric:.6g})")
    return OK if ok else VALIDATION_FAILED


def cmd_synth(args, overrides):
    if args.kind == "forecast":
        ds = datakit.synth_forecast(args.length, args.channels, args.seed, noise=args.noise)
        datakit.write_forecast_csv(args.out, ds.values, ds.channels)
    else:
        ds = datakit.synth_classification(args.kind, args.n, args.seed)
        datakit.write_classification_file(args.out, ds)
    print(f"wrote {args.kind} fixture {args.out}")
    return OK


def cmd_plot(args, overrides):
    report = harness.RunReport.load(args.report)
    text = _loss_table(report)
    if report.sample_forecast:
        text += "\n" + _forecast_table(report.sample_forecast)
    if args.text:
        print(text)
        return OK
    os.makedirs(args.out, exist_ok=True)
    paths = plot_report(report, args.out)
    for p in paths:
        print(f"wrote {p}")
    return OK


def _loss_table(report):
    lines = ["epoch  train_loss    val_loss"]
    lines += [f"{e['epoch']:5d}  {e['train_loss']:.6e}  {e['val_loss']:.6e}" for e in report.epochs]
    return "\n".join(lines)


def _forecast_table(sample):
    truth = np.asarray(sample["truth"])
    pred = np.asarray(sample["prediction"])
    lines = ["step  " + "  ".join(f"truth_{c}  pred_{c}" for c in range(truth.shape[0]))]
    for h in range(truth.shape[1]):
        lines.append(f"{h:4d}  " + "  ".join(f"{truth[c, h]:+.4f}  {pred[c, h]:+.4f}"
                                             for c in range(truth.shape[0])))
    return "\n".join(lines)


def plot_report(report, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [e["epoch"] for e in report.epochs]
    ax.plot(epochs, report.train_losses, label="train")
    ax.plot(epochs, report.val_losses, label="validation")
    ax.axvline(report.best_epoch, color="grey", ls=":", label="best")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    path = os.path.join(out_dir, "loss_curve.png")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    paths.append(path)

    sample = report.sample_forecast
    if sample:
        x = np.asarray(sample["input"])
        truth = np.asarray(sample["truth"])
        pred = np.asarray(sample["prediction"])
        C, T = x.shape
        H = truth.shape[1]
        fig, axes = plt.subplots(C, 1, figsize=(8, 2.5 * C), squeeze=False)
        for c, ax in enumerate(axes[:, 0]):
            ax.plot(np.arange(T), x[c], color="black", lw=1, label="input")
            ax.plot(np.arange(T, T + H), truth[c], color="tab:blue", label="ground truth")
            ax.plot(np.arange(T, T + H), pred[c], color="tab:orange", ls="--", label="prediction")
            ax.set_ylabel(f"channel {c}")
        axes[0, 0].legend(loc="upper left")
        path = os.path.join(out_dir, "forecast_overlay.png")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="convtimenet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--backend", choices=["cython", "python"], help="kernel backend")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; extra --key=value flags override the config")
    t.add_argument("--config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="merge branches and save an inference checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    b = sub.add_parser("bench", help="forward latency of dual-branch vs merged forms")
    b.add_argument("checkpoint", nargs="?")
    b.add_argument("--config")
    b.add_argument("--batch", type=int, default=32)
    b.add_argument("--repeats", type=int, default=50)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--backends", help="comma-separated, e.g. cython,python")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", default="model", choices=sorted(harness.SCOPES) + ["all"])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic fixture dataset")
    s.add_argument("kind", choices=["freq3", "varwidth", "forecast"])
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--length", type=int, default=2000)
    s.add_argument("--channels", type=int, default=2)
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    pl = sub.add_parser("plot", help="loss curve and forecast overlay from a run report")
    pl.add_argument("report")
    pl.add_argument("--out", default=".")
    pl.add_argument("--text", action="store_true", help="print tables instead of images")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if rest and args.command not in ("train", "eval", "bench"):
            raise ConfigError(rest[0], f"unexpected argument for {args.command}")
        overrides = parse_overrides(rest)
        if args.backend:
            kernels.set_backend(args.backend)
        return args.func(args, overrides)
    except (OSError, CheckpointError, datakit.DataError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return IO_ERROR
    except (ValueError, TypeError, MergeError) as e:
        # ConfigError and ShapeError are ValueErrors, as are bad backend names.
        print(f"config error: {e}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
