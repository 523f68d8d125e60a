"""Numpy implementations of the hot kernels.

Same contracts as the compiled core: ties break toward the lower index and
distances are accumulated coordinate by coordinate in the same order, so
both backends agree on generic inputs.
"""
import numpy as np


def knn(queries, points, k):
    """k nearest points per query, sorted by (distance, index)."""
    q = np.ascontiguousarray(queries, dtype=np.float64)
    p = np.ascontiguousarray(points, dtype=np.float64)
    k = min(int(k), p.shape[0])
    d2 = np.zeros((q.shape[0], p.shape[0]))
    for j in range(q.shape[1]):
        diff = q[:, j:j + 1] - p[None, :, j]
        d2 += diff * diff
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx.astype(np.int64), np.sqrt(np.take_along_axis(d2, idx, axis=1))


def nearest_codeword(features, entries):
    f = np.ascontiguousarray(features, dtype=np.float64)
    e = np.ascontiguousarray(entries, dtype=np.float64)
    d2 = np.zeros((f.shape[0], e.shape[0]))
    for j in range(f.shape[1]):
        diff = f[:, j:j + 1] - e[None, :, j]
        d2 += diff * diff
    # argmin returns the first minimum, i.e. the lowest index on ties
    return np.argmin(d2, axis=1).astype(np.int64)


def _sphere_hits(o, d, spheres):
    # |o + t d - c|^2 = r^2 with |d| = 1
    oc = o[:, None, :] - spheres[None, :, :3]
    b = np.einsum("rj,rsj->rs", d, oc)
    c = np.einsum("rsj,rsj->rs", oc, oc) - spheres[None, :, 3] ** 2
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
    return np.where(ok, t, np.inf)


def _box_hits(o, d, boxes):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (boxes[None, :, 0:3] - o[:, None, :]) * inv[:, None, :]
        tb = (boxes[None, :, 3:6] - o[:, None, :]) * inv[:, None, :]
    lo = np.fmin(ta, tb)
    hi = np.fmax(ta, tb)
    tnear = lo.max(axis=2)
    tfar = hi.min(axis=2)
    ok = (tfar >= tnear) & (tfar > 0)
    t = np.where(tnear > 0, tnear, tfar)
    return np.where(ok, t, np.inf)


def raycast(origins, directions, spheres, boxes):
    """First positive hit per ray. Returns (distance, primitive id); inf/-1 on miss.

    Primitive ids number spheres first, then boxes.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    spheres = np.asarray(spheres, dtype=np.float64).reshape(-1, 4)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    cols = []
    if len(spheres):
        cols.append(_sphere_hits(o, d, spheres))
    if len(boxes):
        cols.append(_box_hits(o, d, boxes))
    if not cols:
        return np.full(o.shape[0], np.inf), np.full(o.shape[0], -1, dtype=np.int64)
    t = np.hstack(cols)
    best = np.argmin(t, axis=1)
    dist = t[np.arange(t.shape[0]), best]
    prim = np.where(np.isfinite(dist), best, -1).astype(np.int64)
    return dist, prim
