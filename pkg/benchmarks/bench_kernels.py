"""Time the numba and pure-numpy paths of the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 512]

The numba path is compiled once before timing.  Set QSDERAIN_NO_NUMBA=1 to
check that the package still imports and runs without the compiler; this
script then reports only the numpy column.
"""
import argparse
import time

import numpy as np

from qsderain import _accel, kernels
from qsderain.imaging import default_bank
from qsderain.rain import RainParams, draw_streaks


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, rng):
    img = rng.random((size, size, 3))
    bank = default_bank()
    segs = draw_streaks((size, size), RainParams(), rng)[:, :6].copy()
    x = np.abs(rng.laplace(0, 0.05, 1_000_000))

    def correlate(backend):
        return lambda: [kernels.correlate_same(img, k, backend=backend) for k in bank.kernels]

    def stamp(backend):
        return lambda: kernels.stamp_segments(np.zeros((size, size)), segs, backend=backend)

    def em(backend):
        return lambda: kernels.laplace_em_pass(x, 0.5, 0.02, 0.5, 0.1, backend=backend)

    return {"correlate_same x4": correlate, "stamp_segments": stamp, "laplace_em_pass (1e6)": em}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=512)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [b for b in kernels.BACKENDS if b != "numba" or _accel.USE_NUMBA]
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, make in cases(args.size, rng).items():
        row = {}
        for b in backends:
            fn = make(b)
            fn()  # compile / warm caches
            row[b] = best_of(fn, args.repeat)
        line = f"{name:<24}" + "".join(f"{row[b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{row['numpy'] / row['numba']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
