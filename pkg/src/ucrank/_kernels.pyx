# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_fallback.py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport qsort

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


cdef int _cmp_i64(const void* a, const void* b) noexcept nogil:
    cdef int64_t x = (<const int64_t*>a)[0]
    cdef int64_t y = (<const int64_t*>b)[0]
    return (x > y) - (x < y)


cdef inline uint64_t _mix(uint64_t z) nogil:
    z += GOLDEN
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def mix64(x):
    cdef cnp.ndarray[uint64_t, ndim=1] z = np.array(x, dtype=np.uint64, copy=True, ndmin=1).ravel()
    cdef Py_ssize_t i, n = z.shape[0]
    with nogil:
        for i in range(n):
            z[i] = _mix(z[i])
    return z


def hash_slots(ids, seed, n_slots):
    cdef cnp.ndarray[uint64_t, ndim=1] src = np.ascontiguousarray(ids, dtype=np.uint64).ravel()
    cdef Py_ssize_t i, n = src.shape[0]
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef uint64_t key = _mix(<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF))
    cdef uint64_t m = <uint64_t>n_slots
    with nogil:
        for i in range(n):
            out[i] = <int64_t>(_mix(src[i] ^ key) % m)
    return out


def stream_key(seed, entity, ordinal):
    cdef uint64_t k = _mix(<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF))
    k = _mix(k ^ <uint64_t>(entity & 0xFFFFFFFFFFFFFFFF))
    return _mix(k ^ <uint64_t>(ordinal & 0xFFFFFFFFFFFFFFFF))


def reservoir_indices(Py_ssize_t n, Py_ssize_t cap, uint64_t key):
    cdef cnp.ndarray[int64_t, ndim=1] res
    cdef Py_ssize_t j
    cdef uint64_t r
    if n <= cap:
        return np.arange(n, dtype=np.int64)
    res = np.arange(cap, dtype=np.int64)
    with nogil:
        for j in range(cap, n):
            r = _mix(key + <uint64_t>j * GOLDEN) % (<uint64_t>j + 1)
            if r < <uint64_t>cap:
                res[r] = j
    res.sort()
    return res


def adagrad_rows(floating[:, ::1] table, floating[:, ::1] acc, int64_t[::1] slots,
                 grads, double lr, double eps):
    cdef cnp.ndarray g_arr = np.ascontiguousarray(grads, dtype=np.asarray(table).dtype)
    cdef floating[:, ::1] g = g_arr
    cdef Py_ssize_t r, c, s, m = slots.shape[0], d = table.shape[1]
    cdef double gv, a
    with nogil:
        for r in range(m):
            s = slots[r]
            for c in range(d):
                gv = g[r, c]
                a = acc[s, c] + gv * gv
                acc[s, c] = <floating>a
                table[s, c] -= <floating>(lr * gv / sqrt(<floating>a + eps))


def local_moves(int64_t[::1] indptr, int64_t[::1] indices, double[::1] weights,
                int64_t[::1] comm, double[::1] tot, double[::1] k, double m2):
    cdef Py_ssize_t n = comm.shape[0]
    cdef Py_ssize_t i, p, j, t, n_touched
    cdef int64_t ci, c, best_c
    cdef double ki, g, best_g, stay_g, tol = 1e-12 * m2
    cdef long moves, total_moves = 0
    cdef cnp.ndarray[double, ndim=1] neigh_arr = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[int64_t, ndim=1] touched_arr = np.empty(n + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] seen_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] neigh = neigh_arr
    cdef int64_t[::1] touched = touched_arr
    cdef cnp.uint8_t[::1] seen = seen_arr
    with nogil:
        while True:
            moves = 0
            for i in range(n):
                ci = comm[i]
                ki = k[i]
                n_touched = 0
                for p in range(indptr[i], indptr[i + 1]):
                    j = indices[p]
                    if j == i:
                        continue
                    c = comm[j]
                    if not seen[c]:
                        seen[c] = 1
                        touched[n_touched] = c
                        n_touched += 1
                    neigh[c] += weights[p]
                qsort(&touched[0], n_touched, sizeof(int64_t), _cmp_i64)
                tot[ci] -= ki
                best_c = ci
                best_g = neigh[ci] - tot[ci] * ki / m2
                stay_g = best_g
                for t in range(n_touched):
                    c = touched[t]
                    if c == ci:
                        continue
                    g = neigh[c] - tot[c] * ki / m2
                    if g > best_g + tol or (best_c != ci and fabs(g - best_g) <= tol and c < best_c):
                        best_c = c
                        best_g = g
                if best_c != ci and best_g <= stay_g + tol:
                    best_c = ci
                tot[best_c] += ki
                if best_c != ci:
                    comm[i] = best_c
                    moves += 1
                for t in range(n_touched):
                    c = touched[t]
                    neigh[c] = 0.0
                    seen[c] = 0
            total_moves += moves
            if moves == 0:
                break
    return total_moves
