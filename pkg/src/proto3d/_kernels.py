"""Numba kernels for the per-ray and per-window inner loops.

Every kernel parallelizes over independent items only (rays or windows) and
keeps each item's reductions sequential, so results do not depend on the
number of threads.
"""

import numpy as np
from numba import njit, prange

FREE = 1
OCCUPIED = 2


@njit(cache=True)
def _slab(o, d, lo, hi):
    t0 = 0.0
    t1 = np.inf
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True, parallel=True)
def first_hit(origins, dirs, occ, lo, pitch):
    """Exact voxel traversal; first occupied voxel along each ray.

    Returns ``(index (N,3), t_enter (N,), t_exit (N,))`` with index -1 on a miss.
    """
    n = origins.shape[0]
    shape = occ.shape
    hi = np.empty(3)
    for a in range(3):
        hi[a] = lo[a] + pitch[a] * shape[a]
    out_idx = -np.ones((n, 3), dtype=np.int64)
    t_in = np.full(n, np.nan)
    t_out = np.full(n, np.nan)
    for r in prange(n):
        o = origins[r]
        d = dirs[r]
        t0, t1 = _slab(o, d, lo, hi)
        if t0 > t1:
            continue
        ijk = np.empty(3, dtype=np.int64)
        step = np.empty(3, dtype=np.int64)
        tmax = np.empty(3)
        tdelta = np.empty(3)
        tmid = t0 + 1e-9 * (t1 - t0)
        for a in range(3):
            p = o[a] + tmid * d[a]
            i = int(np.floor((p - lo[a]) / pitch[a]))
            if i < 0:
                i = 0
            if i >= shape[a]:
                i = shape[a] - 1
            ijk[a] = i
            if d[a] > 0:
                step[a] = 1
                tmax[a] = (lo[a] + (i + 1) * pitch[a] - o[a]) / d[a]
                tdelta[a] = pitch[a] / d[a]
            elif d[a] < 0:
                step[a] = -1
                tmax[a] = (lo[a] + i * pitch[a] - o[a]) / d[a]
                tdelta[a] = -pitch[a] / d[a]
            else:
                step[a] = 0
                tmax[a] = np.inf
                tdelta[a] = np.inf
        t_cur = t0
        while True:
            a = 0
            if tmax[1] < tmax[a]:
                a = 1
            if tmax[2] < tmax[a]:
                a = 2
            if occ[ijk[0], ijk[1], ijk[2]]:
                out_idx[r, 0] = ijk[0]
                out_idx[r, 1] = ijk[1]
                out_idx[r, 2] = ijk[2]
                t_in[r] = t_cur
                t_out[r] = min(tmax[a], t1)
                break
            t_cur = tmax[a]
            if t_cur > t1:
                break
            ijk[a] += step[a]
            if ijk[a] < 0 or ijk[a] >= shape[a]:
                break
            tmax[a] += tdelta[a]
    return out_idx, t_in, t_out


@njit(cache=True)
def march_free(origins, dirs, lengths, lo, pitch, step, labels):
    """Fixed-step march; marks FREE before each endpoint and OCCUPIED at it.

    ``labels`` is modified in place; higher label values win, so the result
    does not depend on ray order.
    """
    n = origins.shape[0]
    shape = labels.shape
    hi = np.empty(3)
    for a in range(3):
        hi[a] = lo[a] + pitch[a] * shape[a]
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        length = lengths[r]
        t0, t1 = _slab(o, d, lo, hi)
        if t1 > length:
            t1 = length
        if t0 <= t1:
            k = 0
            while True:
                t = t0 + k * step
                if t >= t1:
                    break
                k += 1
                i = int(np.floor((o[0] + t * d[0] - lo[0]) / pitch[0]))
                j = int(np.floor((o[1] + t * d[1] - lo[1]) / pitch[1]))
                kk = int(np.floor((o[2] + t * d[2] - lo[2]) / pitch[2]))
                if i < 0 or j < 0 or kk < 0 or i >= shape[0] or j >= shape[1] or kk >= shape[2]:
                    continue
                if labels[i, j, kk] < FREE:
                    labels[i, j, kk] = FREE
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        length = lengths[r]
        i = int(np.floor((o[0] + length * d[0] - lo[0]) / pitch[0]))
        j = int(np.floor((o[1] + length * d[1] - lo[1]) / pitch[1]))
        kk = int(np.floor((o[2] + length * d[2] - lo[2]) / pitch[2]))
        if i < 0 or j < 0 or kk < 0 or i >= shape[0] or j >= shape[1] or kk >= shape[2]:
            continue
        labels[i, j, kk] = OCCUPIED


FAST = {"reassoc", "contract", "nsz", "arcp"}


def _columns(batch):
    """(N, n, n, n, c) -> contiguous (N, n*n, n*c) with one row per (x, z) column."""
    b = np.asarray(batch, dtype=np.float64)
    n, c = b.shape[1], b.shape[4]
    return np.ascontiguousarray(b.transpose(0, 1, 3, 2, 4).reshape(b.shape[0], n * n, n * c))


@njit(cache=True, fastmath=FAST)
def _rotate_into(src, rot_index, rot_weight, r, dst):
    """Rotate one column-layout tensor by table ``r`` into ``dst``."""
    npix = src.shape[0]
    m = src.shape[1]
    for p in range(npix):
        for e in range(m):
            dst[p, e] = 0.0
        for tap in range(4):
            q = rot_index[r, p, tap]
            if q >= 0:
                w = rot_weight[r, p, tap]
                for e in range(m):
                    dst[p, e] += w * src[q, e]


@njit(cache=True, fastmath=FAST)
def _dot(a, b):
    acc = 0.0
    for p in range(a.shape[0]):
        for e in range(a.shape[1]):
            acc += a[p, e] * b[p, e]
    return acc


@njit(cache=True, fastmath=FAST)
def _dots4(a, rows, out):
    """``out[w] = <a, rows[w]>``, four rows per pass over ``a``."""
    n = rows.shape[0]
    w = 0
    while w + 4 <= n:
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        for i in range(a.shape[0]):
            x = a[i]
            s0 += x * rows[w, i]
            s1 += x * rows[w + 1, i]
            s2 += x * rows[w + 2, i]
            s3 += x * rows[w + 3, i]
        out[w] = s0
        out[w + 1] = s1
        out[w + 2] = s2
        out[w + 3] = s3
        w += 4
    while w < n:
        acc = 0.0
        for i in range(a.shape[0]):
            acc += a[i] * rows[w, i]
        out[w] = acc
        w += 1


@njit(cache=True, fastmath=FAST)
def _rowdot(a, b):
    acc = 0.0
    for e in range(a.shape[0]):
        acc += a[e] * b[e]
    return acc


CHUNK = 8


@njit(cache=True)
def _score_block(block, w0, adj, tnorms, pairs, gvals, normalize, scores, best):
    """Score a chunk of column-layout crops starting at window ``w0``."""
    cw = block.shape[0]
    nt = adj.shape[0]
    nr = adj.shape[1]
    npair = pairs.shape[0]
    norms = np.empty((cw, nr))
    gram = np.empty(npair)
    for w in range(cw):
        crop = block[w]
        for p in range(npair):
            gram[p] = _rowdot(crop[pairs[p, 0]], crop[pairs[p, 1]])
        for r in range(nr):
            sq = 0.0
            for p in range(npair):
                sq += gvals[r, p] * gram[p]
            norms[w, r] = np.sqrt(max(sq, 0.0))
    # template-major order keeps each adjoint block hot across the chunk
    dots = np.empty(cw)
    flat = block.reshape(cw, -1)
    for t in range(nt):
        for r in range(nr):
            _dots4(adj[t, r].ravel(), flat, dots)
            for w in range(cw):
                d = dots[w]
                nrm = norms[w, r]
                if not normalize:
                    s = d
                elif nrm < 1e-12 or tnorms[t] < 1e-12:
                    s = 0.0
                else:
                    s = min(max(d / (nrm * tnorms[t]), -1.0), 1.0)
                if s > scores[w0 + w, t]:
                    scores[w0 + w, t] = s
                    best[w0 + w, t] = r


@njit(cache=True, parallel=True)
def _window_scores(crops, adj, tnorms, pairs, gvals, normalize):
    nw = crops.shape[0]
    nt = adj.shape[0]
    scores = np.full((nw, nt), -np.inf)
    best = np.zeros((nw, nt), dtype=np.int64)
    nchunk = (nw + CHUNK - 1) // CHUNK
    for ch in prange(nchunk):
        w0 = ch * CHUNK
        w1 = min(w0 + CHUNK, nw)
        _score_block(crops[w0:w1], w0, adj, tnorms, pairs, gvals, normalize, scores, best)
    return scores, best


@njit(cache=True, fastmath=FAST)
def _fill_crop(data, xi, xw, yi, yw, zi, zw, bias, dst):
    """Trilinear crop from per-axis taps into column layout (n*n, n*c).

    Taps with index -1 fall outside the grid and read zero; ``bias`` is
    added to every sample.
    """
    n = xi.shape[0]
    c = data.shape[3]
    for a in range(n):
        for cc in range(n):
            row = dst[a * n + cc]
            for b in range(n):
                for ch in range(c):
                    row[b * c + ch] = bias[ch]
                for ta in range(2):
                    ia = xi[a, ta]
                    if ia < 0:
                        continue
                    for tb in range(2):
                        ib = yi[b, tb]
                        if ib < 0:
                            continue
                        wab = xw[a, ta] * yw[b, tb]
                        for tc in range(2):
                            ic = zi[cc, tc]
                            if ic < 0:
                                continue
                            wt = wab * zw[cc, tc]
                            for ch in range(c):
                                row[b * c + ch] += wt * data[ia, ib, ic, ch]


@njit(cache=True, parallel=True)
def _grid_crops(data, xi, xw, yi, yw, zi, zw, bias):
    nx, ny, nz = xi.shape[0], yi.shape[0], zi.shape[0]
    n = xi.shape[1]
    c = data.shape[3]
    out = np.empty((nx * ny * nz, n * n, n * c))
    for w in prange(nx * ny * nz):
        i = w // (ny * nz)
        j = (w // nz) % ny
        k = w % nz
        _fill_crop(data, xi[i], xw[i], yi[j], yw[j], zi[k], zw[k], bias, out[w])
    return out


@njit(cache=True, parallel=True)
def _grid_window_scores(data, xi, xw, yi, yw, zi, zw, bias, adj, tnorms, pairs, gvals, normalize):
    nx, ny, nz = xi.shape[0], yi.shape[0], zi.shape[0]
    n = xi.shape[1]
    c = data.shape[3]
    nw = nx * ny * nz
    nt = adj.shape[0]
    scores = np.full((nw, nt), -np.inf)
    best = np.zeros((nw, nt), dtype=np.int64)
    nchunk = (nw + CHUNK - 1) // CHUNK
    for ch in prange(nchunk):
        w0 = ch * CHUNK
        w1 = min(w0 + CHUNK, nw)
        block = np.empty((w1 - w0, n * n, n * c))
        for w in range(w0, w1):
            i = w // (ny * nz)
            j = (w // nz) % ny
            k = w % nz
            _fill_crop(data, xi[i], xw[i], yi[j], yw[j], zi[k], zw[k], bias, block[w - w0])
        _score_block(block, w0, adj, tnorms, pairs, gvals, normalize, scores, best)
    return scores, best


@njit(cache=True)
def _adjoint(cols, rot_index, rot_weight):
    nt = cols.shape[0]
    nr = rot_index.shape[0]
    npix = cols.shape[1]
    m = cols.shape[2]
    out = np.zeros((nt, nr, npix, m))
    for t in range(nt):
        for r in range(nr):
            for p in range(npix):
                for tap in range(4):
                    q = rot_index[r, p, tap]
                    if q >= 0:
                        w = rot_weight[r, p, tap]
                        for e in range(m):
                            out[t, r, q, e] += w * cols[t, p, e]
    return out


def adjoint_templates(templates, rots):
    """``M_R^T T`` for every template and rotation, in column layout (T, R, n*n, n*c).

    Since ``<T, M_R C> = <M_R^T T, C>``, scoring rotated crops against
    templates only needs these once per template bank.
    """
    from .voxel import rotation_tables

    idx, wts = rotation_tables(rots)
    return _adjoint(_columns(templates), idx, wts)


def window_scores(crops, templates, tnorms, rots, normalize=True):
    """Rotation-pooled cosine of every crop against every template.

    crops: (W, n, n, n, c); templates: (T, n, n, n, c).  The score of a pair
    is ``max_R cos(template, rotate(crop, R))``.  Returns ``(score (W, T),
    best rotation index (W, T))``; ties keep the first (smallest) rotation.
    Zero-norm inputs score 0.  With ``normalize=False`` the raw inner
    product is pooled instead.

    Rotated crops are never formed: the inner product uses the adjoint warp
    of the template and the rotated norm uses the sparse Gram of the warp.
    """
    from .voxel import rotation_grams

    crops = _columns(crops)
    pairs, gvals = rotation_grams(rots)
    adj = adjoint_templates(templates, rots)
    return _window_scores(crops, adj, np.asarray(tnorms, dtype=np.float64), pairs, gvals, bool(normalize))


@njit(cache=True, fastmath=FAST)
def _sqdist(a, b):
    acc = 0.0
    for p in range(a.shape[0]):
        for e in range(a.shape[1]):
            dv = a[p, e] - b[p, e]
            acc += dv * dv
    return acc


@njit(cache=True, parallel=True)
def _rotated_sqdist(objects, protos, rot_index, rot_weight):
    nobj = objects.shape[0]
    nk = protos.shape[0]
    nr = rot_index.shape[0]
    out = np.zeros((nobj, nk, nr))
    for o in prange(nobj):
        buf = np.empty_like(objects[o])
        for r in range(nr):
            _rotate_into(objects[o], rot_index, rot_weight, r, buf)
            for k in range(nk):
                out[o, k, r] = _sqdist(protos[k], buf)
    return out


def rotated_sqdist(objects, protos, rot_index, rot_weight):
    """Squared L2 distance between every prototype and every rotated object.

    objects: (N, n, n, n, c); protos: (K, n, n, n, c).  Returns (N, K, R).
    """
    return _rotated_sqdist(_columns(objects), _columns(protos), rot_index, rot_weight)


def grid_crops(data, taps, bias):
    """All sliding-window crops of ``data`` (X, Y, Z, c) in column layout.

    ``taps`` holds per-axis ``(index, weight)`` arrays of shape
    (windows along the axis, n, 2).  Window order is x-major, then y, then z.
    """
    (xi, xw), (yi, yw), (zi, zw) = taps
    return _grid_crops(np.ascontiguousarray(data, dtype=np.float64), xi, xw, yi, yw, zi, zw,
                       np.asarray(bias, dtype=np.float64))


def grid_window_scores(data, taps, bias, templates, tnorms, rots, normalize=True):
    """:func:`window_scores` over all sliding windows of ``data`` without storing the crops."""
    from .voxel import rotation_grams

    (xi, xw), (yi, yw), (zi, zw) = taps
    pairs, gvals = rotation_grams(rots)
    adj = adjoint_templates(templates, rots)
    return _grid_window_scores(np.ascontiguousarray(data, dtype=np.float64), xi, xw, yi, yw, zi, zw,
                               np.asarray(bias, dtype=np.float64), adj, np.asarray(tnorms, dtype=np.float64),
                               pairs, gvals, bool(normalize))
