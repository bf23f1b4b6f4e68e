"""Time the compiled kernels against the numpy/pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are run on identical inputs and their outputs compared
before timing, so a speedup is only reported for agreeing results.
"""
import argparse
import timeit

import numpy as np
import scipy.sparse as sp

from ucrank import _fallback

try:
    from ucrank import _kernels
except ImportError:
    _kernels = None


def planted_graph(n, groups, p_in, p_out, seed):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, groups, n)
    p = np.where(g[:, None] == g[None, :], p_in, p_out)
    a = np.triu(rng.random((n, n)) < p, 1).astype(float)
    a = sp.csr_matrix(a + a.T)
    return a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data, \
        np.asarray(a.sum(axis=1)).ravel(), float(a.sum())


def cases(seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 2**63, 1_000_000, dtype=np.uint64)
    slots = rng.choice(1 << 20, 50_000, replace=False).astype(np.int64)
    grads = rng.standard_normal((len(slots), 32)).astype(np.float32)
    graph = planted_graph(2000, 20, 0.05, 0.002, seed)

    def hash_case(mod):
        return lambda: mod.hash_slots(ids, 7, 1 << 20)

    def reservoir_case(mod):
        return lambda: [mod.reservoir_indices(5000, 64, k) for k in range(200)]

    def adagrad_case(mod):
        def run():
            table = np.zeros((1 << 20, 32), dtype=np.float32)
            acc = np.zeros_like(table)
            mod.adagrad_rows(table, acc, slots, grads, 0.05, 1e-8)
            return table[slots]
        return run

    def louvain_case(mod):
        indptr, indices, data, k, m2 = graph

        def run():
            comm = np.arange(len(k), dtype=np.int64)
            tot = k.copy()
            mod.local_moves(indptr, indices, data, comm, tot, k, m2)
            return comm
        return run

    return {"hash_slots 1e6 ids": hash_case, "reservoir 200x(5000,64)": reservoir_case,
            "adagrad 5e4 rows x 32": adagrad_case, "louvain local moves n=2000": louvain_case}


def same(a, b):
    if isinstance(a, list):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-6, atol=0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels are not built; only the fallback is available")
        return
    print(f"{'kernel':<28}{'fallback s':>12}{'compiled s':>12}{'speedup':>9}")
    for name, make in cases().items():
        slow, fast = make(_fallback), make(_kernels)
        if not same(slow(), fast()):
            print(f"{name:<28}  outputs differ between backends")
            continue
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat))
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat))
        print(f"{name:<28}{t_slow:>12.4f}{t_fast:>12.4f}{t_slow / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
