"""Time the ranking-loss kernels: numba loops vs vectorized numpy vs plain python.

    python3 benchmarks/bench_kernels.py --groups 2000 --k 4 --repeat 20
"""
import argparse
import time

import numpy as np

from graphroute import kernels


def _time(fn, args, repeat):
    fn(*args)  # warm-up (numba compiles here)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--groups", type=int, default=2000)
    ap.add_argument("--k", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    S = np.round(rng.random((args.groups, args.k)), 1)
    Y = rng.random((args.groups, args.k))
    R = kernels.rank_rows(S)
    inputs = (S, Y, R, 0)

    impls = {"numpy": kernels.pairwise_loss_grad_numpy}
    if kernels.pairwise_loss_grad_numba is not None:
        impls["numba"] = kernels.pairwise_loss_grad_numba
    impls["python"] = kernels.pairwise_loss_grad_python

    ref_loss, ref_grad = kernels.pairwise_loss_grad_numpy(*inputs)
    print(f"groups={args.groups} K={args.k} repeat={args.repeat}")
    for name, fn in impls.items():
        repeat = 1 if name == "python" else args.repeat
        secs = _time(fn, inputs, repeat)
        loss, grad = fn(*inputs)
        err = max(np.max(np.abs(loss - ref_loss)), np.max(np.abs(grad - ref_grad)))
        print(f"{name:<7} {secs * 1e3:9.3f} ms   max |diff| vs numpy {err:.2e}")


if __name__ == "__main__":
    main()
