"""Numba vs numpy timings for the hot kernels.

Each kernel is called directly through both implementations (the env flag
only picks the default), after a warm-up call that triggers compilation.

    python benchmarks/bench_kernels.py [--size 48] [--repeat 5] [--csv out.csv]
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from weakseg import _accel
from weakseg._lattice import Lattice
from weakseg.kernels import FeatureImage, KernelParams, _pairwise
from weakseg.prior import beta_grid, pair_masses


def timeit(fn, repeat):
    fn()  # warm-up / compile
    best = np.inf
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(size, rng):
    params = KernelParams()
    feat = FeatureImage(rng.uniform(0, 255, (size, size, 3)))
    col = np.ascontiguousarray(feat.colors())
    pos = np.ascontiguousarray(feat.positions())
    vals = rng.dirichlet(np.ones(4), size * size)
    args = (col, pos, vals, params.w1, params.w2,
            0.5 / params.theta_alpha**2, 0.5 / params.beta**2, 0.5 / params.gamma**2)

    lat_feat = np.concatenate([col / params.theta_alpha, pos / params.beta], axis=1)

    pp = rng.dirichlet(np.ones(2), size * size)
    us = beta_grid(1001)
    beta = np.array([0.5, 0.5])

    lattices = {flag: Lattice(lat_feat, use_numba=flag) for flag in (True, False)}

    yield "exact_filter", lambda flag: (lambda: _pairwise(*args, use_numba=flag))
    yield "lattice_build", lambda flag: (lambda: Lattice(lat_feat, use_numba=flag))
    yield "lattice_apply", lambda flag: (lambda: lattices[flag].apply(vals))
    yield "prior_grid", lambda flag: (lambda: pair_masses(pp, beta, 1, 0, us, use_numba=flag))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)
    if _accel.numba is None:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"image {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, make in cases(args.size, rng):
        t_nb = timeit(make(True), args.repeat)
        t_np = timeit(make(False), args.repeat)
        rows.append((name, t_nb * 1e3, t_np * 1e3, t_np / t_nb))
        print(f"{name:<16}{t_nb * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "numba_ms", "numpy_ms", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
