"""Time the compiled and pure-Python kernels on representative inputs.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from pdcap import kernels


def cases(rng):
    grid = rng.normal(size=(7, 7, 2048))
    toks = [list(rng.integers(0, 50, n)) for n in (12, 12)]
    long = [list(rng.integers(0, 50, n)) for n in (200, 200)]
    return {
        "avg_pool2d 7x7x2048 bin 2": lambda: kernels.avg_pool2d(grid, 2),
        "avg_pool2d 7x7x2048 bin 4": lambda: kernels.avg_pool2d(grid, 4),
        "lcs_length 12x12": lambda: kernels.lcs_length(*toks),
        "lcs_length 200x200": lambda: kernels.lcs_length(*long),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the Python backend is available")
    table = {}
    for name in backends:
        prev = kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            fn()  # warm up
            table.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        kernels.use_backend(prev)
    width = max(map(len, table))
    print(f"{'kernel':<{width}}  " + "  ".join(f"{b:>12}" for b in backends) + "   speedup")
    for label, row in table.items():
        cells = "  ".join(f"{row[b] * 1e6:>10.1f}us" for b in backends)
        speed = f"{row['python'] / row['cython']:8.1f}x" if "cython" in row else ""
        print(f"{label:<{width}}  {cells}  {speed}")


if __name__ == "__main__":
    main()
