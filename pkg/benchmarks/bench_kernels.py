"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on the same inputs under both backends; outputs are
checked for agreement before timings are reported.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from drstage.kernels import _pykernels as py

try:
    from drstage.kernels import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    raw = rng.uniform(0, 255, size=(1400, 1800, 3))
    raw[:120] = rng.uniform(0, 5, size=(120, 1800, 3))
    raw[-90:] = 0.0
    padded = rng.uniform(0, 255, size=(1800, 1800, 3))
    aug = rng.uniform(0, 255, size=(518, 518, 3))
    ranks = (2 * np.arange(1, 41)).astype(np.int64)
    return {
        "black_row_bounds 1400x1800": lambda k: k.black_row_bounds(raw, 10.0),
        "resize_bilinear 1800->518": lambda k: k.resize_bilinear(padded, 518, 518),
        "hue_shift 518x518": lambda k: k.hue_shift(aug, 0.013),
        "rank_sum_null_counts 20+20": lambda k: k.rank_sum_null_counts(ranks, 20),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return a == b
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        if not _same(fn(py), fn(cy)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "python_ms": t_py, "cython_ms": t_cy, "speedup": t_py / t_cy})
        print(f"{name:32s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
