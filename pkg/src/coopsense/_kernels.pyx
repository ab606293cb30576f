# cython: language_level=3
"""Compiled hot kernels: ray casting, RANSAC plane search, grid DBSCAN.

Mirrors ``_pykernels`` operation for operation; see that module for contracts.
"""

import numpy as np
cimport numpy as cnp

from . import _pykernels
from libc.math cimport sqrt, fabs, log, log1p, INFINITY

cnp.import_array()

cdef enum:
    _NO_HIT = -1
    _GROUND_HIT = -2

NO_HIT = _NO_HIT
GROUND_HIT = _GROUND_HIT


cdef inline double _slab(double ox, double oy, double oz, double dx, double dy, double dz,
                         const double[:, ::1] b, Py_ssize_t k, double max_range) noexcept nogil:
    """Entry distance of the ray into box ``k``, or -1 when it misses."""
    cdef double lo[3]
    cdef double ld[3]
    cdef double h[3]
    cdef double c = b[k, 6], s = b[k, 7]
    cdef double rx = ox - b[k, 0], ry = oy - b[k, 1], rz = oz - b[k, 2]
    cdef double t0 = -INFINITY, t1 = INFINITY, inv, ta, tb, tn, tf
    cdef int ax
    h[0] = b[k, 3]
    h[1] = b[k, 4]
    h[2] = b[k, 5]
    lo[0] = c * rx + s * ry
    lo[1] = -s * rx + c * ry
    lo[2] = rz
    ld[0] = c * dx + s * dy
    ld[1] = -s * dx + c * dy
    ld[2] = dz
    for ax in range(3):
        if fabs(ld[ax]) < 1e-15:
            if fabs(lo[ax]) > h[ax]:
                return -1.0
            continue
        inv = 1.0 / ld[ax]
        ta = (-h[ax] - lo[ax]) * inv
        tb = (h[ax] - lo[ax]) * inv
        if ta < tb:
            tn = ta
            tf = tb
        else:
            tn = tb
            tf = ta
        if tn > t0:
            t0 = tn
        if tf < t1:
            t1 = tf
    if t0 <= t1 and t0 > 0.0 and t0 <= max_range:
        return t0
    return -1.0


cdef inline void _ground(double oz, double dz, double ground_z, double max_range,
                         double* best_t, long long* hit) noexcept nogil:
    cdef double tg
    if dz < 0.0:
        tg = (ground_z - oz) / dz
        if tg >= 0.0 and tg <= max_range:
            best_t[0] = tg
            hit[0] = _GROUND_HIT


def cast_rays(origin, dirs, boxes, double ground_z, double max_range):
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 8)
    cdef Py_ssize_t m = d.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    t_out = np.full(m, np.inf)
    hit_out = np.full(m, NO_HIT, dtype=np.int64)
    cdef double[::1] best_t = t_out
    cdef long long[::1] hit = hit_out
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef Py_ssize_t r, k
    cdef double t0
    with nogil:
        for r in range(m):
            _ground(oz, d[r, 2], ground_z, max_range, &best_t[r], &hit[r])
            for k in range(nb):
                t0 = _slab(ox, oy, oz, d[r, 0], d[r, 1], d[r, 2], b, k, max_range)
                if t0 >= 0.0 and t0 < best_t[r]:
                    best_t[r] = t0
                    hit[r] = k
    return t_out, hit_out


def cast_grid(origin, dirs, Py_ssize_t n_az, indptr, cols, boxes, double ground_z,
              double max_range):
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 8)
    cdef const long long[::1] ptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef const long long[::1] col = np.ascontiguousarray(cols, dtype=np.int64)
    cdef Py_ssize_t m = d.shape[0]
    cdef Py_ssize_t nb = b.shape[0]
    cdef Py_ssize_t n_ch = m // n_az
    t_out = np.full(m, np.inf)
    hit_out = np.full(m, NO_HIT, dtype=np.int64)
    cdef double[::1] best_t = t_out
    cdef long long[::1] hit = hit_out
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef Py_ssize_t r, k, ch, e
    cdef double t0
    with nogil:
        for r in range(m):
            _ground(oz, d[r, 2], ground_z, max_range, &best_t[r], &hit[r])
        # box-major keeps each box's rays in ascending box order, as in cast_rays
        for k in range(nb):
            for e in range(ptr[k], ptr[k + 1]):
                for ch in range(n_ch):
                    r = ch * n_az + col[e]
                    t0 = _slab(ox, oy, oz, d[r, 0], d[r, 1], d[r, 2], b, k, max_range)
                    if t0 >= 0.0 and t0 < best_t[r]:
                        best_t[r] = t0
                        hit[r] = k
    return t_out, hit_out


box_columns = _pykernels.box_columns


def ransac_plane(xyz, samples, double threshold, double probability):
    cdef const double[:, ::1] p = np.ascontiguousarray(xyz, dtype=np.float64)
    cdef const long long[:, ::1] smp = np.ascontiguousarray(samples, dtype=np.int64)
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t iters = smp.shape[0]
    cdef Py_ssize_t it = 0, q, i, j, k
    cdef long long best = -1, count
    cdef double ux, uy, uz, vx, vy, vz, nx, ny, nz, norm, a, bb, c, dd, w, denom
    cdef double log_fail = log(1.0 - probability)
    cdef double required = <double>iters
    cdef double pa = 0.0, pb = 0.0, pc = 0.0, pd = 0.0
    with nogil:
        while it < iters:
            i = smp[it, 0]
            j = smp[it, 1]
            k = smp[it, 2]
            it += 1
            ux = p[j, 0] - p[i, 0]
            uy = p[j, 1] - p[i, 1]
            uz = p[j, 2] - p[i, 2]
            vx = p[k, 0] - p[i, 0]
            vy = p[k, 1] - p[i, 1]
            vz = p[k, 2] - p[i, 2]
            nx = uy * vz - uz * vy
            ny = uz * vx - ux * vz
            nz = ux * vy - uy * vx
            norm = sqrt(nx * nx + ny * ny + nz * nz)
            if norm >= 1e-12:
                a = nx / norm
                bb = ny / norm
                c = nz / norm
                dd = -(a * p[i, 0] + bb * p[i, 1] + c * p[i, 2])
                count = 0
                for q in range(n):
                    if fabs(((a * p[q, 0] + bb * p[q, 1]) + c * p[q, 2]) + dd) <= threshold:
                        count += 1
                if count > best:
                    best = count
                    pa = a
                    pb = bb
                    pc = c
                    pd = dd
                    w = (<double>count) / (<double>n)
                    if w >= 1.0:
                        required = 0.0
                    else:
                        denom = log1p(-(w * w * w))
                        if denom < 0.0:
                            required = log_fail / denom
                        else:
                            required = INFINITY
            if it >= required:
                break
    if best < 0:
        best = 0
    return np.array([pa, pb, pc, pd]), int(best), int(it)


def plane_inliers(xyz, plane, double threshold):
    cdef const double[:, ::1] p = np.ascontiguousarray(xyz, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], q
    cdef double a = plane[0], b = plane[1], c = plane[2], d = plane[3]
    out = np.zeros(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    with nogil:
        for q in range(n):
            o[q] = fabs(((a * p[q, 0] + b * p[q, 1]) + c * p[q, 2]) + d) <= threshold
    return out


cdef inline Py_ssize_t _find(const long long[::1] ukeys, long long key) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = ukeys.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if ukeys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < ukeys.shape[0] and ukeys[lo] == key:
        return lo
    return -1


cdef inline Py_ssize_t _root(long long[::1] parent, Py_ssize_t a) noexcept nogil:
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


cdef inline bint _near(const double[:, ::1] p, Py_ssize_t i, Py_ssize_t q, double eps2) noexcept nogil:
    cdef double ddx = p[i, 0] - p[q, 0]
    cdef double ddy = p[i, 1] - p[q, 1]
    cdef double ddz = p[i, 2] - p[q, 2]
    return (ddx * ddx + ddy * ddy) + ddz * ddz <= eps2


def dbscan(xyz, double eps, Py_ssize_t min_pts):
    pts = np.ascontiguousarray(xyz, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    labels_out = np.full(n, -1, dtype=np.int64)
    core_out = np.zeros(n, dtype=np.bool_)
    if n == 0:
        return labels_out, core_out
    order_np, ukeys_np, starts_np, counts_np, cell_of_np, deltas_np = _pykernels.fine_grid(pts, eps)
    cdef Py_ssize_t m = ukeys_np.shape[0]
    parent_np = np.arange(m, dtype=np.int64)
    ccount_np = np.zeros(m, dtype=np.int64)
    comp_label_np = np.full(m, -1, dtype=np.int64)

    cdef const double[:, ::1] p = pts
    cdef const long long[::1] order = order_np
    cdef const long long[::1] ukeys = ukeys_np
    cdef const long long[::1] starts = starts_np
    cdef const long long[::1] counts = counts_np
    cdef const long long[::1] cell_of = cell_of_np
    cdef const long long[::1] deltas = deltas_np
    cdef long long[::1] parent = parent_np
    cdef long long[::1] ccount = ccount_np
    cdef long long[::1] comp_label = comp_label_np
    cdef long long[::1] labels = labels_out
    cdef cnp.npy_bool[::1] core = core_out
    cdef Py_ssize_t nd = deltas.shape[0]
    cdef double eps2 = eps * eps
    cdef Py_ssize_t i, q, c, b, di, ma, mb, ra, rb
    cdef long long cnt, next_id = 0, best, lab
    cdef bint found

    with nogil:
        # core points: crowded cells are all core, others count with early exit
        for i in range(n):
            c = cell_of[i]
            if counts[c] >= min_pts:
                core[i] = True
                continue
            cnt = 0
            for di in range(nd):
                b = _find(ukeys, ukeys[c] + deltas[di])
                if b < 0:
                    continue
                for mb in range(starts[b], starts[b] + counts[b]):
                    if _near(p, i, order[mb], eps2):
                        cnt += 1
                        if cnt >= min_pts:
                            break
                if cnt >= min_pts:
                    break
            core[i] = cnt >= min_pts
        for i in range(n):
            if core[i]:
                ccount[cell_of[i]] += 1

        # join core cells holding a pair of core points in reach
        for c in range(m):
            if ccount[c] == 0:
                continue
            for di in range(nd):
                if deltas[di] <= 0:
                    continue
                b = _find(ukeys, ukeys[c] + deltas[di])
                if b < 0 or ccount[b] == 0:
                    continue
                ra = _root(parent, c)
                rb = _root(parent, b)
                if ra == rb:
                    continue
                found = False
                for ma in range(starts[c], starts[c] + counts[c]):
                    i = order[ma]
                    if not core[i]:
                        continue
                    for mb in range(starts[b], starts[b] + counts[b]):
                        q = order[mb]
                        if core[q] and _near(p, i, q, eps2):
                            found = True
                            break
                    if found:
                        break
                if found:
                    if ra < rb:
                        parent[rb] = ra
                    else:
                        parent[ra] = rb

        # clusters numbered in order of their first core point
        for i in range(n):
            if core[i]:
                ra = _root(parent, cell_of[i])
                if comp_label[ra] < 0:
                    comp_label[ra] = next_id
                    next_id += 1
                labels[i] = comp_label[ra]

        # border points: lowest cluster id with a core point in reach
        for i in range(n):
            if core[i]:
                continue
            best = -1
            c = cell_of[i]
            for di in range(nd):
                b = _find(ukeys, ukeys[c] + deltas[di])
                if b < 0 or ccount[b] == 0:
                    continue
                lab = comp_label[_root(parent, b)]
                if best >= 0 and lab >= best:
                    continue
                for mb in range(starts[b], starts[b] + counts[b]):
                    q = order[mb]
                    if core[q] and _near(p, i, q, eps2):
                        best = lab
                        break
            labels[i] = best
    return labels_out, core_out
