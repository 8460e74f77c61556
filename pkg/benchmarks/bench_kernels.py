"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--cols 8] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from looc import _kernels_py as py

try:
    from looc import _kernels as cy
except ImportError:
    cy = None


def cases(rows, cols, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(rows, cols)) * 3
    p = py.softmax_rows(z, 1.0)
    g = rng.normal(size=(rows, cols))
    gh = rng.normal(size=rows)
    scores = np.sort(rng.normal(size=rows).round(3))[::-1].copy()
    pos = rng.random(rows) < 0.5
    return {
        "softmax_rows": lambda m: m.softmax_rows(z, 10.0),
        "softmax_rows_backward": lambda m: m.softmax_rows_backward(p, g, 10.0),
        "entropy_rows": lambda m: m.entropy_rows(p, 1e-12),
        "entropy_rows_backward": lambda m: m.entropy_rows_backward(p, gh, 1e-12),
        "threshold_counts": lambda m: m.threshold_counts(scores, pos),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20000)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; only the fallback is timed")

    print(f"{'kernel':<24}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  match")
    for name, fn in cases(args.rows, args.cols).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<24}{t_py:>10.3f}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        a, b = fn(py), fn(cy)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        same = all(np.allclose(x, y, rtol=1e-12, atol=1e-14) for x, y in zip(a, b))
        print(f"{name:<24}{t_py:>10.3f}{t_cy:>11.3f}{t_py / t_cy:>8.2f}x  {'ok' if same else 'MISMATCH'}")


if __name__ == "__main__":
    main()
