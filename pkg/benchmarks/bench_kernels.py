"""Compare the compiled and numpy retrieval kernels.

    python benchmarks/bench_kernels.py [--batch 1000] [--repeats 7]

Prints one row per (backend, pool size, k) with the median wall time of a
batched product-key search and the agreement with the numpy backend.
"""
import argparse
import statistics
import time

import numpy as np

from elasticrec.kernels import available_backends


def timeit(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=1000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'backend':8} {'K':>6} {'k':>3} {'median_ms':>10} {'speedup':>8} agree")
    for n_keys, k in ((16, 8), (32, 8), (64, 16), (128, 32)):
        q = rng.normal(size=(args.batch, args.d))
        c1 = rng.normal(size=(n_keys, args.d // 2))
        c2 = rng.normal(size=(n_keys, args.d // 2))
        ref = backends["python"].product_key_topk(q, c1, c2, k)
        base = None
        for name in ("python", "cython"):
            if name not in backends:
                continue
            impl = backends[name]
            t = timeit(lambda: impl.product_key_topk(q, c1, c2, k), args.repeats)
            base = base or t
            agree = np.array_equal(impl.product_key_topk(q, c1, c2, k)[0], ref[0])
            print(f"{name:8} {n_keys * n_keys:6d} {k:3d} {t * 1e3:10.3f} {base / t:8.2f} {agree}")


if __name__ == "__main__":
    main()
