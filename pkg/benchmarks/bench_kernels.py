"""Time the compiled and pure-Python kernel backends on desk-sized batches.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Prints one line per (kernel, backend) with the median wall time, then the
speed-up of the compiled backend and the max deviation between the two.
"""
import argparse
import statistics
import time

import numpy as np

from srlab import kernels


def _time(fn, repeat):
    fn()  # warm-up
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(batch, rng):
    x1 = rng.standard_normal((batch, 1, 16, 16)).astype(np.float32)
    w1 = rng.standard_normal((8, 1, 3, 3)).astype(np.float32)
    x2 = rng.standard_normal((batch, 8, 8, 8)).astype(np.float32)
    w2 = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    b8, b16 = np.zeros(8, np.float32), np.zeros(16, np.float32)
    g1 = rng.standard_normal((batch, 8, 16, 16)).astype(np.float32)
    g2 = rng.standard_normal((batch, 16, 8, 8)).astype(np.float32)
    p = rng.standard_normal((batch, 8, 16, 16)).astype(np.float32)
    gp = rng.standard_normal((batch, 8, 8, 8)).astype(np.float32)
    return {
        "conv1 forward": lambda: kernels.conv2d_forward(x1, w1, b8, 1),
        "conv1 backward": lambda: kernels.conv2d_backward(x1, w1, g1, 1),
        "conv2 forward": lambda: kernels.conv2d_forward(x2, w2, b16, 1),
        "conv2 backward": lambda: kernels.conv2d_backward(x2, w2, g2, 1),
        "maxpool forward": lambda: kernels.maxpool2_forward(p),
        "maxpool backward": lambda: kernels.maxpool2_backward(gp, kernels.maxpool2_forward(p)[1], 16, 16),
    }


def _flat(result):
    parts = result if isinstance(result, tuple) else (result,)
    return [np.asarray(r, dtype=np.float64) for r in parts if r is not None]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}; batch {args.batch}; median of {args.repeat}")
    rng = np.random.default_rng(0)
    table = cases(args.batch, rng)
    for name, fn in table.items():
        times, outs = {}, {}
        for b in backends:
            with kernels.use_backend(b):
                times[b] = _time(fn, args.repeat)
                outs[b] = _flat(fn())
        line = "  ".join(f"{b} {times[b] * 1e3:8.3f} ms" for b in backends)
        if len(backends) > 1:
            dev = max(float(np.abs(a - c).max(initial=0.0)) for a, c in zip(outs["cython"], outs["python"]))
            line += f"  speed-up {times['python'] / times['cython']:5.1f}x  max|diff| {dev:.2e}"
        print(f"{name:17s} {line}")


if __name__ == "__main__":
    main()
