"""Compare the compiled and numpy conv3d backends on model-sized tensors.

Runs forward, input-gradient, and parameter-gradient kernels for the layer
shapes the detector actually executes (training patches and an inference
window), printing the median wall time of each backend, the speedup, and the
largest element difference between the two results.

Usage: python benchmarks/bench_conv.py [--repeats N]
"""

import argparse
import time

import numpy as np

from ctb.net import kernels

# (label, x shape, w shape, stride, pad)
SHAPES = [
    ("stem 32^3", (1, 32, 32, 32), (8, 1, 3, 3, 3), 1, 1),
    ("down 32->16", (8, 32, 32, 32), (16, 8, 3, 3, 3), 2, 1),
    ("mid 16^3", (16, 16, 16, 16), (16, 16, 3, 3, 3), 1, 1),
    ("deep 8^3", (32, 8, 8, 8), (32, 32, 3, 3, 3), 1, 1),
    ("head 1^3 conv", (32, 8, 8, 8), (30, 32, 1, 1, 1), 1, 0),
    ("window 48^3", (8, 48, 48, 48), (8, 8, 3, 3, 3), 1, 1),
]


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def bench_case(label, x_shape, w_shape, stride, pad, repeats, rng):
    x = rng.standard_normal(x_shape, dtype=np.float32)
    w = rng.standard_normal(w_shape, dtype=np.float32) * 0.1
    b = rng.standard_normal(w_shape[0], dtype=np.float32)
    y_shape = kernels.out_shape(x_shape, w_shape, stride, pad)
    dy = rng.standard_normal(y_shape, dtype=np.float32)

    ops = [
        ("forward",
         lambda: kernels.conv3d_forward(x, w, b, stride, pad),
         lambda: kernels.conv3d_forward_numpy(x, w, b, stride, pad)),
        ("input grad",
         lambda: kernels.conv3d_input_grad(dy, w, x_shape, stride, pad),
         lambda: kernels.conv3d_input_grad_numpy(dy, w, x_shape, stride, pad)),
        ("param grad",
         lambda: kernels.conv3d_param_grad(dy, x, w_shape, stride, pad),
         lambda: kernels.conv3d_param_grad_numpy(dy, x, w_shape, stride, pad)),
    ]
    for op, native_fn, numpy_fn in ops:
        t_native, out_native = median_time(native_fn, repeats)
        t_numpy, out_numpy = median_time(numpy_fn, repeats)
        diff = max_diff(out_native, out_numpy)
        print(f"{label:<14} {op:<11} native {t_native * 1e3:8.2f} ms   "
              f"numpy {t_numpy * 1e3:8.2f} ms   x{t_numpy / t_native:5.2f}   "
              f"max|diff| {diff:.2e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timed repetitions per kernel (median reported)")
    args = parser.parse_args()
    print(f"active backend: {kernels.active_backend()}")
    if kernels.active_backend() != "native":
        print("compiled extension unavailable; both columns run numpy")
    rng = np.random.default_rng(0)
    for spec in SHAPES:
        bench_case(*spec, repeats=args.repeats, rng=rng)


if __name__ == "__main__":
    main()
