"""Compiled vs. pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import sys
import time

import numpy as np

from msfusion import kernels
from msfusion.classifiers import gaussian_kernel


def _time(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    X = rng.standard_normal((300, 20))
    y = np.where(X[:, 0] + 0.5 * X[:, 1] ** 2 > 0.3, 1.0, -1.0)
    K = gaussian_kernel(X, X, 0.05)
    S = rng.standard_normal((2000, 3))
    ys = np.sign(S[:, 0] + 0.1)
    order = np.stack([rng.permutation(2000) for _ in range(100)])
    M = rng.random((128, 166))
    xp = rng.standard_normal((32, 16, 66, 65)).astype(np.float32)
    cols = rng.standard_normal((32, 32, 32, 16, 3, 3)).astype(np.float32)
    return {
        "smo_solve n=300": lambda b: kernels.smo_solve(K, y, 10.0, backend=b),
        "hinge_sgd n=2000 x 100 epochs": lambda b: kernels.hinge_sgd(S, ys, order, 1e-2, 1e-3, backend=b),
        "bicubic_resize 128x166 -> 128x126": lambda b: kernels.bicubic_resize(M, 128, 126, backend=b),
        "im2col 32x16x64x63 k3 s2": lambda b: kernels.im2col(xp, 3, 2, 32, 32, backend=b),
        "col2im 32x16x66x65 k3 s2": lambda b: kernels.col2im(cols, (32, 16, 66, 65), 2, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if kernels._compiled is None:
        print("compiled extension not built; run `pip install --no-build-isolation -e .`", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':36s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        tp = _time(lambda: fn("python"), args.repeat) * 1e3
        tc = _time(lambda: fn("compiled"), args.repeat) * 1e3
        rows.append({"kernel": name, "python_ms": tp, "compiled_ms": tc, "speedup": tp / tc})
        print(f"{name:36s} {tp:10.2f} {tc:12.2f} {tp / tc:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
