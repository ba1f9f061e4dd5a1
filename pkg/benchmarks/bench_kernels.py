"""Benchmark the compiled patch-assembly kernels against the NumPy fallback.

Times im2col / col2im on the convolution shapes of the default model, plus a
full conv2d forward+backward pass per backend, and reports the speedup.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("OODKIT_THREADS", "1"))
os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("OODKIT_THREADS", "1"))

import numpy as np  # noqa: E402

from oodkit import kernels  # noqa: E402
from oodkit.autodiff import Tensor, conv2d  # noqa: E402

# (batch, in_ch, side, out_ch, kernel, stride, padding) per default-model layer
LAYERS = [
    (64, 3, 32, 16, 3, 1, 1),
    (64, 16, 32, 16, 3, 1, 1),
    (64, 16, 32, 32, 3, 2, 1),
    (64, 32, 16, 32, 3, 1, 1),
    (64, 32, 16, 64, 3, 2, 1),
    (64, 64, 8, 64, 3, 1, 1),
]


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_patch_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'shape':38s} {'op':7s} " + " ".join(f"{n:>10s}" for n in kernels.available()))
    totals = {name: 0.0 for name in kernels.available()}
    for n, cin, side, cout, k, stride, pad in LAYERS:
        x = rng.standard_normal((n, cin, side, side)).astype(np.float32)
        oh = (side + 2 * pad - k) // stride + 1
        cols = rng.standard_normal((n * oh * oh, cin * k * k)).astype(np.float32)
        label = f"N{n} {cin:>3}ch {side}px -> {cout:>3}ch k{k} s{stride}"
        for op, runner in (
            ("im2col", lambda b: b.im2col(x, k, k, stride, pad, oh, oh)),
            ("col2im", lambda b: b.col2im(cols, n, cin, side, side, k, k, stride, pad, oh, oh)),
        ):
            row = []
            for name in kernels.available():
                backend = kernels.use(name)
                dt = best_of(lambda: runner(backend), repeats)
                totals[name] += dt
                row.append(f"{dt * 1e3:9.2f}ms")
            print(f"{label:38s} {op:7s} " + " ".join(row))
    return totals


def bench_conv_end_to_end(repeats):
    rng = np.random.default_rng(1)
    print("\nconv2d forward+backward (all layers):")
    results = {}
    for name in kernels.available():
        kernels.use(name)

        def step():
            for n, cin, side, cout, k, stride, pad in LAYERS:
                x = Tensor(rng.standard_normal((n, cin, side, side)).astype(np.float32),
                           requires_grad=True)
                w = Tensor(rng.standard_normal((cout, cin, k, k)).astype(np.float32) * 0.1,
                           requires_grad=True)
                b = Tensor(np.zeros(cout), requires_grad=True)
                conv2d(x, w, b, stride=stride, padding=pad).sum().backward()

        results[name] = best_of(step, repeats)
        print(f"  {name:8s} {results[name] * 1e3:9.1f} ms")
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"available backends: {', '.join(kernels.available())}")
    if "cython" not in kernels.available():
        print("compiled extension not built; benchmarking the fallback only")

    totals = bench_patch_kernels(args.repeats)
    results = bench_conv_end_to_end(args.repeats)
    kernels.use("auto")

    if "cython" in totals:
        print(f"\npatch-kernel speedup (numpy/cython): {totals['numpy'] / totals['cython']:.2f}x")
        print(f"end-to-end conv speedup:             {results['numpy'] / results['cython']:.2f}x")


if __name__ == "__main__":
    main()
