"""Compiled vs pure-Python kernels: SOR sweeps and the fused Euler step.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Prints best-of-N wall times for both backends and their ratio.
"""

import argparse
import time

import numpy as np

from ldcontrol import kernels
from ldcontrol.control_problem import Domain, ProblemSpec
from ldcontrol.grid import Grid
from ldcontrol.hjb_elliptic import _generators
from ldcontrol.presets import laplacian, two_drift
from ldcontrol.sde_engine import FeedbackPolicy, simulate_batch


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_sor(h, repeat):
    ball = Domain.ball([0.0, 0.0], 1.0)
    grid = Grid.for_domain(ball, h)
    gen = _generators(laplacian(2), grid)[0]
    M = -gen.matrix
    rhs = gen.cost + gen.const
    out = {}
    for backend in ("cython", "python"):
        out[backend] = best_of(lambda: kernels.sor_solve(M, rhs, omega=1.9, tol=1e-8,
                                                         backend=backend), repeat)
    return f"sor h=1/{round(1 / h)} n={grid.n_interior}", out


def bench_em(n_paths, repeat):
    ball = Domain.ball([0.0, 0.0], 1.0)
    spec = ProblemSpec.elliptic(two_drift(2), ball)
    pol = FeedbackPolicy.constant(1)
    ids = np.arange(n_paths)
    out = {}
    for backend in ("cython", "python"):
        out[backend] = best_of(lambda: simulate_batch(spec.field, ball, pol, [0.0, 0.0], 1e-3,
                                                      ids, 0, backend=backend), repeat)
    return f"exit paths n={n_paths} dt=1e-3", out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled kernels are not built; run pip install -e . first")
    rows = [bench_sor(1 / 32, args.repeat), bench_sor(1 / 64, args.repeat),
            bench_em(5000, args.repeat), bench_em(20000, args.repeat)]
    print(f"{'case':34} {'cython s':>10} {'python s':>10} {'speedup':>8}")
    for name, t in rows:
        print(f"{name:34} {t['cython']:10.4f} {t['python']:10.4f} "
              f"{t['python'] / t['cython']:8.1f}")


if __name__ == "__main__":
    main()
