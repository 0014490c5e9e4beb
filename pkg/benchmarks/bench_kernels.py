"""Time the compiled pair-expectation kernel against the numpy fallback.

Run from the repository root after building the extension::

    python benchmarks/bench_kernels.py [--pairs 20000] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from depthlab import _pykernels
from depthlab._kernels import KIND_CODES
from depthlab.numerics.gaussian import TANH_ORDER, hermite_rule

try:
    from depthlab import _ckernels
except ImportError:
    _ckernels = None


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    hxx = rng.uniform(0.1, 4.0, n)
    hyy = rng.uniform(0.1, 4.0, n)
    rho = rng.uniform(-1.0, 1.0, n)
    return hxx, hyy, rho * np.sqrt(hxx * hyy)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--pairs", type=int, default=20000)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    hxx, hyy, hxy = random_pairs(args.pairs)
    nodes, weights = hermite_rule(TANH_ORDER)
    print(f"{args.pairs} covariance pairs, best of {args.repeat}")
    print(f"{'act':<8}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}{'max diff':>12}")
    for name, code in KIND_CODES.items():
        call_py = lambda: _pykernels.pair_means(code, hxx, hyy, hxy, nodes, weights)
        t_py = min(timeit.repeat(call_py, number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<8}{t_py:12.2f}{'n/a':>14}")
            continue
        call_c = lambda: _ckernels.pair_means(code, hxx, hyy, hxy, nodes, weights)
        t_c = min(timeit.repeat(call_c, number=1, repeat=args.repeat)) * 1e3
        diff = max(float(np.abs(np.asarray(a) - np.asarray(b)).max()) for a, b in zip(call_py(), call_c()))
        print(f"{name:<8}{t_py:12.2f}{t_c:14.2f}{t_py / t_c:10.1f}{diff:12.1e}")


if __name__ == "__main__":
    main()
