# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_fallback``; identical contracts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def knn(queries, points, k):
    cdef double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t nq = q.shape[0], n = p.shape[0], dim = q.shape[1]
    cdef Py_ssize_t kk = min(<Py_ssize_t>k, n)
    idx_arr = np.empty((nq, kk), dtype=np.int64)
    dist_arr = np.empty((nq, kk), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] dist = dist_arr
    cdef Py_ssize_t i, j, c, s
    cdef double d2, diff
    for i in range(nq):
        s = 0
        for j in range(n):
            d2 = 0.0
            for c in range(dim):
                diff = q[i, c] - p[j, c]
                d2 = d2 + diff * diff
            if s == kk and d2 >= dist[i, kk - 1]:
                continue
            # insertion into the sorted buffer; equal distances keep the earlier index first
            if s < kk:
                s += 1
            c = s - 1
            while c > 0 and dist[i, c - 1] > d2:
                dist[i, c] = dist[i, c - 1]
                idx[i, c] = idx[i, c - 1]
                c -= 1
            dist[i, c] = d2
            idx[i, c] = j
        for c in range(kk):
            dist[i, c] = sqrt(dist[i, c])
    return idx_arr, dist_arr


def nearest_codeword(features, entries):
    cdef double[:, ::1] f = np.ascontiguousarray(features, dtype=np.float64)
    cdef double[:, ::1] e = np.ascontiguousarray(entries, dtype=np.float64)
    cdef Py_ssize_t m = f.shape[0], v = e.shape[0], dim = f.shape[1]
    out_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, j, c, best
    cdef double d2, diff, bestd
    for i in range(m):
        best = 0
        bestd = INFINITY
        for j in range(v):
            d2 = 0.0
            for c in range(dim):
                diff = f[i, c] - e[j, c]
                d2 = d2 + diff * diff
            if d2 < bestd:
                bestd = d2
                best = j
        out[i] = best
    return out_arr


cdef inline double _sphere(double ox, double oy, double oz, double dx, double dy, double dz,
                           double cx, double cy, double cz, double r) nogil:
    cdef double ocx = ox - cx, ocy = oy - cy, ocz = oz - cz
    cdef double b = dx * ocx + dy * ocy + dz * ocz
    cdef double c = ocx * ocx + ocy * ocy + ocz * ocz - r * r
    cdef double disc = b * b - c
    cdef double sq, t0, t1
    if disc < 0:
        return INFINITY
    sq = sqrt(disc)
    t0 = -b - sq
    t1 = -b + sq
    if t0 > 0:
        return t0
    if t1 > 0:
        return t1
    return INFINITY


cdef inline double _box(double* o, double* d, double* lo_c, double* hi_c) nogil:
    cdef double tnear = -INFINITY, tfar = INFINITY, ta, tb, inv, lo, hi
    cdef int a
    for a in range(3):
        if d[a] == 0.0:
            # parallel to the slab: 0 * inf would be nan, numpy's fmin/fmax drop it
            if o[a] < lo_c[a] or o[a] > hi_c[a]:
                return INFINITY
            continue
        inv = 1.0 / d[a]
        ta = (lo_c[a] - o[a]) * inv
        tb = (hi_c[a] - o[a]) * inv
        lo = ta if ta < tb else tb
        hi = tb if ta < tb else ta
        if lo > tnear:
            tnear = lo
        if hi < tfar:
            tfar = hi
    if tfar >= tnear and tfar > 0:
        return tnear if tnear > 0 else tfar
    return INFINITY


def raycast(origins, directions, spheres, boxes):
    cdef double[:, ::1] o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    cdef double[:, ::1] sp = np.ascontiguousarray(np.asarray(spheres, dtype=np.float64).reshape(-1, 4))
    cdef double[:, ::1] bx = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 6))
    cdef Py_ssize_t nr = o.shape[0], ns = sp.shape[0], nb = bx.shape[0]
    dist_arr = np.full(nr, np.inf)
    prim_arr = np.full(nr, -1, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef cnp.int64_t[::1] prim = prim_arr
    cdef Py_ssize_t i, j
    cdef double t, best
    cdef Py_ssize_t besti
    for i in range(nr):
        best = INFINITY
        besti = -1
        for j in range(ns):
            t = _sphere(o[i, 0], o[i, 1], o[i, 2], d[i, 0], d[i, 1], d[i, 2],
                        sp[j, 0], sp[j, 1], sp[j, 2], sp[j, 3])
            if t < best:
                best = t
                besti = j
        for j in range(nb):
            t = _box(&o[i, 0], &d[i, 0], &bx[j, 0], &bx[j, 3])
            if t < best:
                best = t
                besti = ns + j
        dist[i] = best
        prim[i] = besti
    return dist_arr, prim_arr
