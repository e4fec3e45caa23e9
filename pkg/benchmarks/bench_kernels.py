"""Compare the compiled and numpy kernel backends.

Times depthwise convolution and interpolation (forward and backward) on both
backends, then full-model forward latency for the dual-branch and merged forms
under each backend. Usage::

    python benchmarks/bench_kernels.py [--repeats 30] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from convtimenet import kernels
from convtimenet.harness import bench
from convtimenet.model import ModelConfig, init_model


def _median_ms(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def kernel_cases(rng, dtype=np.float32):
    B, C, M = 32, 64, 42
    cases = {}
    for k in (7, 19, 53):
        xpad = rng.standard_normal((B, C, M + k - 1)).astype(dtype)
        w = rng.standard_normal((C, k)).astype(dtype)
        b = rng.standard_normal(C).astype(dtype)
        gy = rng.standard_normal((B, C, M)).astype(dtype)
        cases[f"dw_conv_fwd k={k}"] = lambda xpad=xpad, w=w, b=b: kernels.dw_conv1d_forward(xpad, w, b)
        cases[f"dw_conv_bwd k={k}"] = lambda xpad=xpad, w=w, gy=gy: kernels.dw_conv1d_backward(xpad, w, gy)
    series = rng.standard_normal((B, 7, 344)).astype(dtype)
    pos = rng.uniform(0, 343, (B, 42 * 16)).astype(dtype)
    gout = rng.standard_normal((B, 7, pos.shape[1])).astype(dtype)
    cases["interp_fwd"] = lambda: kernels.interp_forward(series, pos)
    cases["interp_bwd"] = lambda: kernels.interp_backward(series, pos, gout)
    return cases


def run(repeats=30, seed=0):
    backends = kernels.available_backends()
    previous = kernels.backend()
    cases = kernel_cases(np.random.default_rng(seed))
    table = {}
    try:
        for name, fn in cases.items():
            row = {}
            for be in backends:
                kernels.set_backend(be)
                row[be] = _median_ms(fn, repeats)
            table[name] = row
    finally:
        kernels.set_backend(previous)
    model = init_model(ModelConfig(task="classify", C=1, T=336)).eval()
    forms = bench(model=model, batch=32, repeats=max(5, repeats // 3), seed=seed, backends=backends)
    return {"kernels_ms": table, "model": forms["forms"]}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    res = run(args.repeats, args.seed)
    backends = kernels.available_backends()
    print(f"{'kernel (median ms)':<24s}" + "".join(f"{b:>12s}" for b in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for name, row in res["kernels_ms"].items():
        line = f"{name:<24s}" + "".join(f"{row[b]:12.3f}" for b in backends)
        if "cython" in row and "python" in row:
            line += f"{row['python'] / row['cython']:11.1f}x"
        print(line)
    print("\nmodel forward, batch 32 (median ms)")
    for be, forms in res["model"].items():
        print(f"  {be:<8s} dual {forms['dual']['median_ms']:8.2f}   merged {forms['merged']['median_ms']:8.2f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()
