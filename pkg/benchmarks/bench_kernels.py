#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the numpy fallback.

Shapes mirror the encoder/decoder stages at the training batch size.
Run from the repo root after `python setup.py build_ext --inplace`:

    python benchmarks/bench_kernels.py [--batch 32] [--repeat 5]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tilechange.nn import backend  # noqa: E402

# (label, Cin, H/W, Cout, dilation)
STAGES = [
    ("enc stage1 dil", 8, 32, 32, 2),
    ("enc stage1 fuse", 96, 32, 32, 1),
    ("enc stage2 dil", 32, 16, 64, 2),
    ("enc stage3 res", 128, 8, 128, 1),
    ("enc stage4 res", 256, 4, 256, 1),
    ("dec stage1", 256, 4, 128, 1),
    ("dec stage3", 64, 16, 32, 1),
    ("dec out", 32, 32, 4, 1),
]


def flops(batch, ci, hw, co, k=3):
    return 2.0 * batch * co * ci * k * k * hw * hw


def time_call(fn, *args, repeat=5):
    fn(*args)  # warm-up
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)

    backends = {"numpy": backend.select_kernels("numpy")}
    try:
        backends["compiled"] = backend.select_kernels("compiled")
    except ImportError:
        print("compiled kernels not built; benchmarking numpy only", file=sys.stderr)

    rng = np.random.default_rng(0)
    header = f"{'stage':<18} {'kernel':<12}" + "".join(f" {name:>12}" for name in backends) + "   speedup"
    print(f"batch={args.batch} dtype={args.dtype}  (best of {args.repeat}, GFLOP/s)")
    print(header)
    print("-" * len(header))
    totals = {name: 0.0 for name in backends}
    for label, ci, hw, co, dil in STAGES:
        ksize = 1 if "fuse" in label else 3
        pad = ((ksize - 1) * dil) // 2
        x = rng.normal(size=(args.batch, ci, hw, hw)).astype(dtype)
        w = rng.normal(size=(co, ci, ksize, ksize)).astype(dtype)
        y = backends["numpy"].conv2d_forward(x, w, 1, dil, pad)
        gy = rng.normal(size=y.shape).astype(dtype)
        gf = flops(args.batch, ci, hw, co, ksize) / 1e9
        for kernel, call in (
            ("forward", lambda k: k.conv2d_forward(x, w, 1, dil, pad)),
            ("grad_input", lambda k: k.conv2d_grad_input(gy, w, x.shape, 1, dil, pad)),
            ("grad_weight", lambda k: k.conv2d_grad_weight(gy, x, w.shape, 1, dil, pad)),
        ):
            times = {name: time_call(lambda: call(mod), repeat=args.repeat) for name, mod in backends.items()}
            for name, t in times.items():
                totals[name] += t
            rates = "".join(f" {gf / times[name]:>12.1f}" for name in backends)
            if len(backends) == 2:
                speedup = times["numpy"] / times["compiled"]
                print(f"{label:<18} {kernel:<12}{rates}   {speedup:>6.2f}x")
            else:
                print(f"{label:<18} {kernel:<12}{rates}")
    print("-" * len(header))
    line = f"{'total time':<18} {'':<12}" + "".join(f" {totals[name]:>11.3f}s" for name in backends)
    if len(backends) == 2:
        line += f"   {totals['numpy'] / totals['compiled']:>6.2f}x"
    print(line)


if __name__ == "__main__":
    main()
