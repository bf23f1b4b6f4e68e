"""Pure Python / numpy implementations of the hot kernels.

Each function here has a compiled twin in ``_kernels.pyx`` with the same
signature and the same results (bit-identical for the integer kernels
and float64 tables); ``ucrank.kernels`` picks one at import.
"""
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def mix64(x):
    """SplitMix64 finalizer applied elementwise (wrapping uint64 arithmetic)."""
    z = np.array(x, dtype=np.uint64, copy=True, ndmin=1)
    with np.errstate(over="ignore"):
        z += GOLDEN
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_slots(ids, seed, n_slots):
    ids = np.asarray(ids, dtype=np.uint64)
    key = mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))[0]
    return (mix64(ids ^ key) % np.uint64(n_slots)).astype(np.int64)


def stream_key(seed, entity, ordinal):
    k = mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    k = mix64(k ^ np.uint64(entity & 0xFFFFFFFFFFFFFFFF))
    return int(mix64(k ^ np.uint64(ordinal & 0xFFFFFFFFFFFFFFFF))[0])


def reservoir_indices(n, cap, key):
    """Algorithm R over positions ``0..n-1`` driven by a counter-based stream.

    Draw j (for j >= cap) is ``mix64(key + j*GOLDEN) % (j + 1)``; the slot it
    lands in keeps the last j written, so the loop reduces to a scatter-max.
    """
    if n <= cap:
        return np.arange(n, dtype=np.int64)
    j = np.arange(cap, n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        draws = mix64(np.uint64(key) + j * GOLDEN) % (j + np.uint64(1))
    hit = draws < np.uint64(cap)
    res = np.arange(cap, dtype=np.int64)
    np.maximum.at(res, draws[hit].astype(np.int64), j[hit].astype(np.int64))
    res.sort()
    return res


def adagrad_rows(table, acc, slots, grads, lr, eps):
    """In-place per-coordinate Adagrad on rows ``slots`` (must be unique)."""
    g = np.asarray(grads, dtype=table.dtype)
    a = acc[slots] + g * g
    acc[slots] = a
    table[slots] -= (lr * g / np.sqrt(a + eps)).astype(table.dtype)


def local_moves(indptr, indices, weights, comm, tot, k, m2):
    """Louvain local-moving phase; mutates ``comm`` and ``tot``.

    Nodes are visited in index order; a node joins the neighbouring
    community with the largest modularity gain (lowest id on ties) when
    that gain strictly beats staying. Sweeps repeat until one makes no move.
    Returns the number of moves.
    """
    n = len(comm)
    total_moves = 0
    tol = 1e-12 * m2
    while True:
        moves = 0
        for i in range(n):
            ci = comm[i]
            ki = k[i]
            neigh = {}
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                if j == i:
                    continue
                c = comm[j]
                neigh[c] = neigh.get(c, 0.0) + weights[p]
            tot[ci] -= ki
            best_c = ci
            best_g = neigh.get(ci, 0.0) - tot[ci] * ki / m2
            stay_g = best_g
            for c in sorted(neigh):
                if c == ci:
                    continue
                g = neigh[c] - tot[c] * ki / m2
                if g > best_g + tol or (best_c != ci and abs(g - best_g) <= tol and c < best_c):
                    best_c, best_g = c, g
            if best_c != ci and best_g <= stay_g + tol:
                best_c = ci
            tot[best_c] += ki
            if best_c != ci:
                comm[i] = best_c
                moves += 1
        total_moves += moves
        if moves == 0:
            return total_moves
