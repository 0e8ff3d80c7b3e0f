# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled retrieval kernels; same contracts as ``_fallback``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline bint _beats(double s, long long i, double t, long long j) nogil:
    # higher score wins; equal score -> lower id wins
    return s > t or (s == t and i < j)


cdef void _insert(double s, long long i, double[:] vals, long long[:] ids,
                  Py_ssize_t* filled, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t pos = filled[0]
    if pos == k:
        if not _beats(s, i, vals[k - 1], ids[k - 1]):
            return
        pos = k - 1
    else:
        filled[0] += 1
    while pos > 0 and _beats(s, i, vals[pos - 1], ids[pos - 1]):
        vals[pos] = vals[pos - 1]
        ids[pos] = ids[pos - 1]
        pos -= 1
    vals[pos] = s
    ids[pos] = i


def topk_rows(scores, Py_ssize_t k):
    cdef double[:, ::1] sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t b, n = sc.shape[1], nb = sc.shape[0], j
    out_idx = np.empty((nb, k), dtype=np.int64)
    out_val = np.empty((nb, k), dtype=np.float64)
    cdef long long[:, ::1] oi = out_idx
    cdef double[:, ::1] ov = out_val
    cdef Py_ssize_t filled
    with nogil:
        for b in range(nb):
            filled = 0
            for j in range(n):
                _insert(sc[b, j], j, ov[b], oi[b], &filled, k)
    return out_idx, out_val


def product_key_topk(queries, c_keys, c_prime_keys, Py_ssize_t k):
    cdef double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef double[:, ::1] c1 = np.ascontiguousarray(c_keys, dtype=np.float64)
    cdef double[:, ::1] c2 = np.ascontiguousarray(c_prime_keys, dtype=np.float64)
    cdef Py_ssize_t nb = q.shape[0], d = q.shape[1], half = c1.shape[1], ns = c1.shape[0]
    cdef Py_ssize_t b, i, j, t, a, filled
    cdef double acc
    cdef long long ci, cj
    sub_v1 = np.empty(k, dtype=np.float64)
    sub_v2 = np.empty(k, dtype=np.float64)
    sub_i1 = np.empty(k, dtype=np.int64)
    sub_i2 = np.empty(k, dtype=np.int64)
    cdef double[:] v1 = sub_v1, v2 = sub_v2
    cdef long long[:] i1 = sub_i1, i2 = sub_i2
    out_idx = np.empty((nb, k), dtype=np.int64)
    out_val = np.empty((nb, k), dtype=np.float64)
    cdef long long[:, ::1] oi = out_idx
    cdef double[:, ::1] ov = out_val
    with nogil:
        for b in range(nb):
            filled = 0
            for i in range(ns):
                acc = 0.0
                for t in range(half):
                    acc += q[b, t] * c1[i, t]
                _insert(acc, i, v1, i1, &filled, k)
            filled = 0
            for i in range(ns):
                acc = 0.0
                for t in range(half):
                    acc += q[b, half + t] * c2[i, t]
                _insert(acc, i, v2, i2, &filled, k)
            filled = 0
            for a in range(k):
                ci = i1[a]
                for j in range(k):
                    cj = i2[j]
                    acc = 0.0
                    for t in range(half):
                        acc += q[b, t] * c1[ci, t]
                    for t in range(half):
                        acc += q[b, half + t] * c2[cj, t]
                    _insert(acc, ci * ns + cj, ov[b], oi[b], &filled, k)
    return out_idx, out_val
