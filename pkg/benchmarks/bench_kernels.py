"""Benchmark the compiled kernels against the pure-numpy fallback.

Shapes mirror what one training step actually runs through: the image
encoder (stride 2) and the per-token mask decoder (stride 1 at rising
resolution), plus component labeling on predicted masks.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from groundseg import _kernels_np as numpy_impl
from groundseg import kernels

try:
    from groundseg import _kernels_cy as cython_impl
except ImportError:
    cython_impl = None

CONV_CASES = [
    # (label, x shape, k, stride, pad)
    ("encoder 64px s2", (16, 3, 64, 64), 3, 2, 1),
    ("encoder 16px s2", (16, 32, 16, 16), 3, 2, 1),
    ("decoder 16px s1", (24, 16, 16, 16), 3, 1, 1),
    ("decoder 32px s1", (24, 8, 32, 32), 3, 1, 1),
    ("decoder 64px s1", (24, 8, 64, 64), 3, 1, 1),
]


def timeit(fn, repeats=10):
    fn()  # warm
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1000.0


def bench_conv(impl):
    rows = []
    rng = np.random.default_rng(0)
    for label, shape, k, stride, pad in CONV_CASES:
        x = rng.normal(size=shape).astype(np.float32)
        cols = impl.im2col(x, k, stride, pad)
        fwd = timeit(lambda: impl.im2col(x, k, stride, pad))
        c = np.ascontiguousarray(rng.normal(size=cols.shape).astype(np.float32))
        bwd = timeit(lambda: impl.col2im(c, shape, k, stride, pad))
        rows.append((label, fwd, bwd))
    return rows


def bench_labels(impl):
    rng = np.random.default_rng(1)
    masks = [rng.random((64, 64)) > 0.55 for _ in range(50)]

    def run():
        for m in masks:
            impl.label_components(m)

    return timeit(run, repeats=5)


def main():
    impls = [("numpy", numpy_impl)]
    if cython_impl is not None:
        impls.append(("cython", cython_impl))
    print(f"active backend: {kernels.BACKEND}\n")
    header = f"{'case':20s}" + "".join(f"{name + ' im2col':>16s}{name + ' col2im':>16s}"
                                       for name, _ in impls)
    print(header)
    results = {name: bench_conv(impl) for name, impl in impls}
    for i, (label, *_rest) in enumerate(results[impls[0][0]]):
        line = f"{label:20s}"
        for name, _ in impls:
            _, fwd, bwd = results[name][i]
            line += f"{fwd:13.2f} ms{bwd:13.2f} ms"
        print(line)
    print()
    for name, impl in impls:
        print(f"label_components (50 masks, 64x64): {name} {bench_labels(impl):.2f} ms")


if __name__ == "__main__":
    main()
