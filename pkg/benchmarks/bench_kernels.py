"""Compare the compiled and pure-Python kernel backends.

Times the fused dual iteration and the sparse Cholesky factorization on a
generated MPC instance and checks that both backends return the same bits.

    python benchmarks/bench_kernels.py --M 20 --repeat 200
"""

import argparse
import time

import numpy as np

from fastdual import kernels
from fastdual.dmpc import GeneratorConfig, condense, generate
from fastdual.metrics import exact_metric, scalar_metric
from fastdual.solvers import DualStepper


def _time(fn, repeat):
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            out = fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best, out


def run(M, repeat, seed):
    problem = condense(generate(GeneratorConfig(M=M, seed=seed)))
    L = scalar_metric(problem, "two_norm")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(problem.dual_dim)
    xi_prev = rng.standard_normal(problem.dual_dim)
    results = {}
    for name in kernels.available():
        with kernels.use(name):
            stepper = DualStepper(problem, L)
            t_step, step_out = _time(lambda: stepper.step(z, xi_prev, 0.5), repeat)
            t_chol, metric = _time(lambda: exact_metric(problem), max(1, repeat // 50))
            results[name] = (t_step, t_chol, step_out, metric.Lx)
    print(f"instance: M={M}, n={problem.partition.n}, dual dim={problem.dual_dim}")
    print(f"{'backend':>8s} {'dual step [us]':>15s} {'cholesky [ms]':>14s}")
    for name, (t_step, t_chol, _, _) in results.items():
        print(f"{name:>8s} {t_step * 1e6:15.1f} {t_chol * 1e3:14.2f}")
    if len(results) == 2:
        (_, _, a, fa), (_, _, b, fb) = results["cython"], results["python"]
        same = all(np.array_equal(u, v) for u, v in zip(a[:4], b[:4])) and np.array_equal(fa, fb)
        ratio = results["python"][0] / results["cython"][0]
        print(f"dual step speedup {ratio:.1f}x, identical outputs: {same}")
    else:
        print("compiled backend unavailable; only the fallback was timed")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--M", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    run(args.M, args.repeat, args.seed)


if __name__ == "__main__":
    main()
