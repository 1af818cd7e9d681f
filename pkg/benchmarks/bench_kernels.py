"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes match one default training step: 16 clouds of 256 points with
128 features, and the contrastive term for a batch of 16.
"""
import argparse
import timeit

import numpy as np

from hrcpose import _kernels_py

try:
    from hrcpose import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    x32 = rng.standard_normal((16 * 256, 128)).astype(np.float32)
    x64 = x32.astype(np.float64)
    n = 16
    f = rng.standard_normal((n, 128))
    d2 = ((f[:, None] - f[None]) ** 2).sum(-1)
    mask = rng.random((n, n, n)) < 0.5
    weight = rng.random((n, n)) / (n * n)
    g32 = rng.standard_normal((16, 128)).astype(np.float32)
    _, am = _kernels_py.maxpool_forward(x32, 16)
    return {
        "maxpool_forward f32 (4096x128 -> 16x128)": lambda k: k.maxpool_forward(x32, 16),
        "maxpool_forward f64 (4096x128 -> 16x128)": lambda k: k.maxpool_forward(x64, 16),
        "maxpool_backward f32": lambda k: k.maxpool_backward(g32, am, 256),
        "ranked_contrast (16x16x16)": lambda k: k.ranked_contrast(d2, mask, weight, 2.0),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    if _kernels is None:
        print("compiled extension not built; showing the fallback only")
    print(f"{'kernel':44s}" + "".join(f"{name:>14s}" for name, _ in backends) + ("   speedup" if _kernels else ""))
    for label, fn in cases(rng).items():
        times = []
        for _, mod in backends:
            fn(mod)
            t = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3)) / args.repeat
            times.append(t)
        row = f"{label:44s}" + "".join(f"{t * 1e6:11.1f} us" for t in times)
        if len(times) == 2:
            row += f"   {times[0] / times[1]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
