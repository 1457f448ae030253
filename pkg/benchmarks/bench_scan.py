"""Time the gadget-scan kernel: numba vs numpy on a synthetic instruction stream.

    python benchmarks/bench_scan.py [--n 2000000] [--markers 20000] [--repeat 5]
"""
import argparse
import time

import numpy as np

from speccfi import _kernels


def make_stream(n, n_markers, seed=0):
    rng = np.random.default_rng(seed)
    codes = rng.choice(np.array([0, 1, 2], dtype=np.int8), size=n, p=[0.85, 0.09, 0.06])
    starts = np.sort(rng.choice(n, size=n_markers, replace=False)).astype(np.int64)
    return codes, starts


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2_000_000)
    ap.add_argument("--markers", type=int, default=20_000)
    ap.add_argument("--window", type=int, default=70)
    ap.add_argument("--gap", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    codes, starts = make_stream(args.n, args.markers)
    run = lambda b: _kernels.scan_windows(codes, starts, args.window, args.gap, backend=b)

    ref = run("numpy")
    t_np = best_of(lambda: run("numpy"), args.repeat)
    print(f"numpy  {t_np * 1e3:9.2f} ms  ({sum(len(x) for x in ref)} gadgets)")

    if _kernels.BACKEND != "numba":
        print("numba  unavailable (SPECCFI_DISABLE_NUMBA set or numba missing)")
        return
    t0 = time.perf_counter()
    got = run("numba")  # includes compilation
    compile_s = time.perf_counter() - t0
    assert all(np.array_equal(a, b) for a, b in zip(ref, got)), "backends disagree"
    t_nb = best_of(lambda: run("numba"), args.repeat)
    print(f"numba  {t_nb * 1e3:9.2f} ms  (first call incl. compile {compile_s:.2f} s)")
    print(f"speedup {t_np / t_nb:.1f}x")


if __name__ == "__main__":
    main()
