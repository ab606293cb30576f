"""Numpy implementations of the hot kernels.

Same signatures and floating-point operation order as ``_kernels.pyx`` so the
two backends agree bit for bit on ray ranges, RANSAC planes and DBSCAN labels.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

NO_HIT = -1
GROUND_HIT = -2


def cast_rays(origin, dirs, boxes, ground_z, max_range):
    """Nearest hit of each ray against yaw-rotated boxes and the plane z=ground_z.

    ``boxes`` rows are ``cx cy cz half_l half_w half_h cos_yaw sin_yaw``.
    Returns ``(t, hit)``; ``hit`` is a box row, ``GROUND_HIT`` or ``NO_HIT``.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 8)
    ox, oy, oz = (float(v) for v in origin)
    m = dirs.shape[0]
    dz = dirs[:, 2]
    best_t = np.full(m, np.inf)
    hit = np.full(m, NO_HIT, dtype=np.int64)

    down = dz < 0.0
    tg = np.full(m, np.inf)
    tg[down] = (ground_z - oz) / dz[down]
    ok = down & (tg >= 0.0) & (tg <= max_range)
    best_t[ok] = tg[ok]
    hit[ok] = GROUND_HIT

    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(boxes.shape[0]):
            t0, ok = _slab(ox, oy, oz, dirs, boxes[k], max_range)
            cand = ok & (t0 < best_t)
            best_t[cand] = t0[cand]
            hit[cand] = k
    return best_t, hit


def box_columns(origin, rot, az, boxes):
    """Azimuth columns whose rays can reach each box, as CSR ``(indptr, cols)``.

    A ray that hits a box hits its bounding sphere, and the horizontal part of
    its direction (in the sensor frame) then points into the sphere's shadow
    disk, which bounds the azimuth. Sensors inside the disk get every column.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 8)
    az = np.asarray(az, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    loc = (boxes[:, :3] - np.asarray(origin, dtype=np.float64)) @ np.asarray(rot)[:3, :3]
    dh = np.hypot(loc[:, 0], loc[:, 1])
    r = np.sqrt(boxes[:, 3] ** 2 + boxes[:, 4] ** 2 + boxes[:, 5] ** 2) * (1.0 + 1e-9)
    phi = np.arctan2(loc[:, 1], loc[:, 0])
    with np.errstate(invalid="ignore", divide="ignore"):
        half = np.where(dh > r, np.arcsin(np.minimum(1.0, r / dh)), np.pi) + 1e-6
    diff = np.abs(np.remainder(az[None, :] - phi[:, None] + np.pi, 2 * np.pi) - np.pi)
    mask = diff <= half[:, None]
    indptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))]).astype(np.int64)
    return indptr, np.nonzero(mask)[1].astype(np.int64)


def cast_grid(origin, dirs, n_az, indptr, cols, boxes, ground_z, max_range):
    """:func:`cast_rays` for a channel-major ray grid with per-box column culling.

    Ray ``ch * n_az + j`` is only tested against boxes listing column ``j``.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 8)
    ox, oy, oz = (float(v) for v in origin)
    m = dirs.shape[0]
    n_ch = m // n_az
    best_t, hit = cast_rays(origin, dirs, np.zeros((0, 8)), ground_z, max_range)
    ch_base = (np.arange(n_ch, dtype=np.int64) * n_az)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(boxes.shape[0]):
            cset = cols[indptr[k]:indptr[k + 1]]
            if len(cset) == 0:
                continue
            rays = (ch_base + cset[None, :]).ravel()
            t0, ok = _slab(ox, oy, oz, dirs[rays], boxes[k], max_range)
            cand = ok & (t0 < best_t[rays])
            best_t[rays[cand]] = t0[cand]
            hit[rays[cand]] = k
    return best_t, hit


def _slab(ox, oy, oz, d, box, max_range):
    cx, cy, cz, hl, hw, hh, c, s = box
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    m = d.shape[0]
    rx = ox - cx
    ry = oy - cy
    rz = oz - cz
    lox = c * rx + s * ry
    loy = -s * rx + c * ry
    loz = rz
    ldx = c * dx + s * dy
    ldy = -s * dx + c * dy
    ldz = dz
    t0 = np.full(m, -np.inf)
    t1 = np.full(m, np.inf)
    miss = np.zeros(m, dtype=bool)
    for lo, ld, h in ((lox, ldx, hl), (loy, ldy, hw), (loz, ldz, hh)):
        ld = np.broadcast_to(ld, (m,))
        par = np.abs(ld) < 1e-15
        if abs(lo) > h:
            miss |= par
        inv = 1.0 / np.where(par, 1.0, ld)
        ta = (-h - lo) * inv
        tb = (h - lo) * inv
        tn = np.minimum(ta, tb)
        tf = np.maximum(ta, tb)
        t0 = np.where(par, t0, np.maximum(t0, tn))
        t1 = np.where(par, t1, np.minimum(t1, tf))
    return t0, (~miss) & (t0 <= t1) & (t0 > 0.0) & (t0 <= max_range)


def ransac_plane(xyz, samples, threshold, probability):
    """Best plane over the pre-drawn sample triples, with early termination.

    Returns ``(plane, n_inliers, iterations)``; ``plane`` is ``(a, b, c, d)``
    with unit normal, or all zeros when every sample was degenerate.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    samples = np.ascontiguousarray(samples, dtype=np.int64)
    n = xyz.shape[0]
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    best = -1
    plane = np.zeros(4)
    log_fail = math.log(1.0 - probability)
    required = float(samples.shape[0])
    it = 0
    while it < samples.shape[0]:
        i, j, k = samples[it]
        it += 1
        ux = x[j] - x[i]
        uy = y[j] - y[i]
        uz = z[j] - z[i]
        vx = x[k] - x[i]
        vy = y[k] - y[i]
        vz = z[k] - z[i]
        nx = uy * vz - uz * vy
        ny = uz * vx - ux * vz
        nz = ux * vy - uy * vx
        norm = math.sqrt(nx * nx + ny * ny + nz * nz)
        if norm >= 1e-12:
            a = nx / norm
            b = ny / norm
            c = nz / norm
            d = -(a * x[i] + b * y[i] + c * z[i])
            count = int(np.count_nonzero(np.abs(((a * x + b * y) + c * z) + d) <= threshold))
            if count > best:
                best = count
                plane[:] = (a, b, c, d)
                w = count / n
                if w >= 1.0:
                    required = 0.0
                else:
                    denom = math.log1p(-(w * w * w))
                    required = log_fail / denom if denom < 0.0 else math.inf
        if it >= required:
            break
    return plane, max(best, 0), it


def plane_inliers(xyz, plane, threshold):
    a, b, c, d = (float(v) for v in plane)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    return np.abs(((a * x + b * y) + c * z) + d) <= threshold


# cell side eps / (sqrt(3) * (1 + margin)): any two points sharing a cell are
# within eps even after rounding, and neighbours are at most two cells away
_CELL_MARGIN = 1e-6
_REACH = 2
_PAIR_CHUNK = 1 << 22


def fine_grid(xyz, eps):
    """Sort points into cubic cells small enough that a cell is a clique.

    Returns ``(order, ukeys, starts, counts, cell_of, deltas)``: the stable
    key order of the points, the sorted distinct cell keys with the start and
    size of each cell in ``order``, each point's cell index, and the key
    offsets of the 125 cells within reach.
    """
    h = eps / (math.sqrt(3.0) * (1.0 + _CELL_MARGIN))
    cells = np.floor(xyz / h).astype(np.int64)
    cells -= cells.min(axis=0)
    cells += _REACH
    dims = cells.max(axis=0) + _REACH + 1
    if float(dims[0]) * float(dims[1]) * float(dims[2]) >= 2.0**62:
        raise OverflowError("point extent too large for grid keys at this eps")
    keys = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(keys, kind="stable").astype(np.int64)
    ukeys, starts, counts = np.unique(keys[order], return_index=True, return_counts=True)
    cell_of = np.searchsorted(ukeys, keys).astype(np.int64)
    r = range(-_REACH, _REACH + 1)
    deltas = np.array([(ox * dims[1] + oy) * dims[2] + oz for ox in r for oy in r for oz in r],
                      dtype=np.int64)
    return (order, ukeys.astype(np.int64), starts.astype(np.int64), counts.astype(np.int64),
            cell_of, deltas)


def _cell_pairs(ukeys, deltas, src_mask, dst_mask, positive_only=False):
    """``(a, b)`` cell index pairs within reach, ``a`` from ``src_mask``, ``b`` from ``dst_mask``."""
    m = len(ukeys)
    idx = np.flatnonzero(src_mask)
    A, B = [], []
    for d in deltas:
        if positive_only and d <= 0:
            continue
        nk = ukeys[idx] + d
        pos = np.minimum(np.searchsorted(ukeys, nk), m - 1)
        ok = (ukeys[pos] == nk) & dst_mask[pos]
        A.append(idx[ok])
        B.append(pos[ok])
    return np.concatenate(A), np.concatenate(B)


def _members(cells, starts, counts, order):
    """Points of each listed cell, with the position of their cell in the list."""
    cnt = counts[cells]
    total = int(cnt.sum())
    grp = np.repeat(np.arange(len(cells)), cnt)
    offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    return grp, order[np.repeat(starts[cells], cnt) + offs]


def _point_pairs(A, B, a_cells, b_cells):
    """Chunks of ``(pair, p, q)``: every point ``p`` of cell ``A[pair]`` with every ``q`` of ``B[pair]``.

    ``a_cells`` and ``b_cells`` are ``(starts, counts, order)`` membership tables.
    """
    work = a_cells[1][A] * b_cells[1][B]
    bounds = np.searchsorted(np.cumsum(work), np.arange(0, int(work.sum()), _PAIR_CHUNK), "right")
    bounds = np.unique(np.concatenate([[0], bounds, [len(A)]]))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ga, p = _members(A[lo:hi], *a_cells)
        gb, q = _members(B[lo:hi][ga], *b_cells)
        yield lo + ga[gb], p[gb], q


def _within(xyz, p, q, eps2):
    ddx = xyz[p, 0] - xyz[q, 0]
    ddy = xyz[p, 1] - xyz[q, 1]
    ddz = xyz[p, 2] - xyz[q, 2]
    return (ddx * ddx + ddy * ddy) + ddz * ddz <= eps2


def _box_bounds(A, B, lo, hi, eps2):
    """Per cell pair: no pair can be in reach (reject) / every pair is (accept)."""
    gap = np.maximum(0.0, np.maximum(lo[B] - hi[A], lo[A] - hi[B]))
    span = np.maximum(hi[B] - lo[A], hi[A] - lo[B])
    dmin = (gap[:, 0] * gap[:, 0] + gap[:, 1] * gap[:, 1]) + gap[:, 2] * gap[:, 2]
    dmax = (span[:, 0] * span[:, 0] + span[:, 1] * span[:, 1]) + span[:, 2] * span[:, 2]
    return dmin > eps2, dmax <= eps2


def dbscan(xyz, eps, min_pts):
    """Grid DBSCAN; returns ``(labels, core)`` with noise labelled -1.

    Clusters are numbered by their lowest-index core point and a border point
    goes to the lowest-numbered cluster with a core point in reach, which is
    what an index-order sequential scan produces.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    n = xyz.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    core = np.zeros(n, dtype=bool)
    if n == 0:
        return labels, core
    eps2 = eps * eps
    order, ukeys, starts, counts, cell_of, deltas = fine_grid(xyz, eps)
    m = len(ukeys)
    cells = (starts, counts, order)

    # a crowded cell is all core; points of sparse cells count their neighbours
    core = counts[cell_of] >= min_pts
    sparse = counts < min_pts
    if sparse.any():
        A, B = _cell_pairs(ukeys, deltas, sparse, np.ones(m, dtype=bool))
        hits = np.zeros(n, dtype=np.int64)
        for _, p, q in _point_pairs(A, B, cells, cells):
            hits += np.bincount(p[_within(xyz, p, q, eps2)], minlength=n)
        core |= hits >= min_pts
    if not core.any():
        return labels, core

    corder = order[core[order]]
    ccounts = np.bincount(cell_of[core], minlength=m)
    cstarts = np.cumsum(ccounts) - ccounts
    ccells = (cstarts, ccounts, corder)
    has_core = ccounts > 0

    # join core cells: box bounds settle most pairs, the rest are checked point-wise
    A, B = _cell_pairs(ukeys, deltas, has_core, has_core, positive_only=True)
    nz = np.flatnonzero(has_core)
    lo = np.zeros((m, 3))
    hi = np.zeros((m, 3))
    lo[nz] = np.minimum.reduceat(xyz[corder], cstarts[nz], axis=0)
    hi[nz] = np.maximum.reduceat(xyz[corder], cstarts[nz], axis=0)
    reject, accept = _box_bounds(A, B, lo, hi, eps2)

    def components(a, b):
        g = csr_matrix((np.ones(len(a), dtype=np.int8), (a, b)), shape=(m, m))
        return connected_components(g, directed=False)[1]

    comp = components(A[accept], B[accept])
    open_ = ~reject & ~accept
    A2, B2 = A[open_], B[open_]
    undecided = comp[A2] != comp[B2]
    A2, B2 = A2[undecided], B2[undecided]
    linked = np.zeros(len(A2), dtype=bool)
    for pair, p, q in _point_pairs(A2, B2, ccells, ccells):
        linked[pair[_within(xyz, p, q, eps2)]] = True
    comp = components(np.concatenate([A[accept], A2[linked]]),
                      np.concatenate([B[accept], B2[linked]]))

    # number components by their first core point
    core_idx = np.flatnonzero(core)
    pc = comp[cell_of[core_idx]]
    first = np.full(m, n, dtype=np.int64)
    np.minimum.at(first, pc, core_idx)
    used = np.flatnonzero(first < n)
    rank = np.full(m, -1, dtype=np.int64)
    rank[used[np.argsort(first[used], kind="stable")]] = np.arange(len(used))
    labels[core_idx] = rank[pc]

    # border points take the lowest cluster id among core points in reach
    border_cells = np.bincount(cell_of[~core], minlength=m) > 0
    if border_cells.any():
        A, B = _cell_pairs(ukeys, deltas, border_cells, has_core)
        bcount = np.bincount(cell_of[~core], minlength=m)
        border_order = order[~core[order]]
        bstarts = np.cumsum(bcount) - bcount
        best = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
        for _, p, q in _point_pairs(A, B, (bstarts, bcount, border_order), ccells):
            ok = _within(xyz, p, q, eps2)
            np.minimum.at(best, p[ok], labels[q[ok]])
        reached = best != np.iinfo(np.int64).max
        labels[reached] = best[reached]
    return labels, core
