"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best-of-N wall time for both paths and checks that
they agree. The first numba call (compilation) is excluded.
"""

import argparse
import time

import numpy as np

from scene_action_vad import kernels, metrics


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    X = rng.normal(size=(20000, 64))
    C = rng.normal(size=(25, 64))
    yield ("assign_nearest 20000x64 k=25",
           lambda: kernels._sqdist_assign_jit(X, C), lambda: kernels._sqdist_assign_np(X, C))
    yield ("argmax_cosine 20000x64 k=25",
           lambda: kernels._cos_argmax_jit(X, C), lambda: kernels._cos_argmax_np(X, C))
    n = 5000
    starts = np.sort(rng.integers(0, 100000, n))
    ends = np.minimum(starts + 24, 100000)
    s = rng.random(n)
    yield ("frame_max 5000 spans / 1e5 frames",
           lambda: metrics._frame_max_jit(starts, ends, s, 100000),
           lambda: metrics._frame_max_np(starts, ends, s, 100000))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<36}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, jit_fn, np_fn in cases(rng):
        jit_fn()  # compile
        tj, a = best_of(jit_fn, args.repeat)
        tn, b = best_of(np_fn, args.repeat)
        print(f"{name:<36}{tj * 1e3:>10.2f}{tn * 1e3:>10.2f}{tn / tj:>8.1f}x  {same(a, b)}")


if __name__ == "__main__":
    main()
