"""Time the numba and numpy paths of the hot kernels.

    python3 benchmarks/bench_kernels.py [--replicates 1000] [--size 25] [--repeat 5]

Both paths run in this process; the dispatch flag is toggled between runs.
The first numba call (compilation or cache load) is excluded from timing.
"""

import argparse
import os
import time

import numpy as np

from peerassign import kernels
from peerassign.evalharness import g_table, replicate_uniforms
from peerassign.peernn import PeerNNParams, masked_row_softmax

FLAG = "PEERASSIGN_NO_NUMBA"


def best_of(fn, repeat):
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return min(out)


def run(path, fn, repeat):
    if path == "numpy":
        os.environ[FLAG] = "1"
    else:
        os.environ.pop(FLAG, None)
    try:
        fn()  # warm-up
        return best_of(fn, repeat)
    finally:
        os.environ.pop(FLAG, None)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--replicates", type=int, default=1000)
    ap.add_argument("--size", type=int, default=25)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    om = masked_row_softmax(2.0 * rng.normal(size=(n, n)))
    B = rng.integers(3, 6, n)
    A_s = rng.integers(0, 2, (n, 10))
    A_f = rng.integers(1, 4, (n, 10))
    U = replicate_uniforms(0, args.replicates, n)
    gtab = g_table()

    p = PeerNNParams.init(8, 0.5, seed=0)
    X = rng.random((n, 8))
    z = rng.random(n)

    cases = {
        f"sample_trait_errors (N={n}, R={args.replicates})":
            lambda: kernels.sample_trait_errors(om, B, A_s, A_f, gtab, U),
        f"peer_vector x1000 (N={n}, D=8)":
            lambda: [kernels.peer_vector(X, p.W0, p.W1, p.W2, z) for _ in range(1000)],
    }
    print(f"{'kernel':<42}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for name, fn in cases.items():
        t_nb = run("numba", fn, args.repeat)
        t_np = run("numpy", fn, args.repeat)
        print(f"{name:<42}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
