"""Compare the compiled and numpy BN kernels on MNIST-sized batches.

    python3 benchmarks/bench_kernels.py [--batch 128] [--features 30] [--repeat 200]
"""
import argparse
import timeit

import numpy as np

from fedtan.kernels import available_backends


def kernel_calls(mod, y, gamma, beta, g, eps=1e-5):
    def run():
        mean, var = mod.bn_moments(y)
        _, norm = mod.bn_normalize(y, mean, var, gamma, beta, eps)
        d_mean, d_var, _, _ = mod.bn_stat_grads(g, y, norm, mean, var, gamma, eps)
        mod.bn_input_grad(g, y, mean, var, gamma, eps, d_mean, d_var)
    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=128)
    parser.add_argument("--features", type=int, default=30)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    y = rng.normal(size=(args.batch, args.features))
    g = rng.normal(size=y.shape)
    gamma, beta = rng.normal(size=args.features), rng.normal(size=args.features)
    timings = {}
    for name, mod in available_backends().items():
        fn = kernel_calls(mod, y, gamma, beta, g)
        fn()
        best = min(timeit.repeat(fn, number=args.repeat, repeat=5)) / args.repeat
        timings[name] = best
        print(f"{name:>7}: {best * 1e6:9.1f} us per forward+backward "
              f"(batch {args.batch}, features {args.features})")
    if len(timings) == 2:
        print(f"speedup: {timings['python'] / timings['cython']:.2f}x")


if __name__ == "__main__":
    main()
