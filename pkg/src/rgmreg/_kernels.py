"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the ``RGM_NUMBA``
environment variable is not set to a false value (``0``, ``false``, ``off``,
``no``).  Both paths return bit-identical results: distances are accumulated
in the same order and ties resolve to the lowest index in each.
"""

import os

import numpy as np

_FALSE = {"0", "false", "off", "no"}

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("RGM_NUMBA", "1").strip().lower() not in _FALSE

# rows per chunk in the numpy distance kernels (bounds the N x M temporaries)
_CHUNK_ELEMS = 1 << 22


def _sqdist_block(query, reference):
    dx = query[:, None, 0] - reference[None, :, 0]
    dy = query[:, None, 1] - reference[None, :, 1]
    dz = query[:, None, 2] - reference[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _chunks(n_rows, n_cols):
    step = max(1, _CHUNK_ELEMS // max(1, n_cols))
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


# ---------------------------------------------------------------------------
# numpy path


def knn_numpy(query, reference, k):
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for a, b in _chunks(query.shape[0], reference.shape[0]):
        d = _sqdist_block(query[a:b], reference)
        out[a:b] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def nearest_numpy(query, reference):
    dist = np.empty(query.shape[0])
    idx = np.empty(query.shape[0], dtype=np.int64)
    for a, b in _chunks(query.shape[0], reference.shape[0]):
        d = _sqdist_block(query[a:b], reference)
        j = np.argmin(d, axis=1)
        idx[a:b] = j
        dist[a:b] = d[np.arange(b - a), j]
    return dist, idx


def lap_numpy(cost):
    """Min-cost assignment on a square matrix (shortest augmenting path).

    Returns ``(col_of_row, u, v)`` where ``u[i] + v[j] <= cost[i, j]`` with
    equality on the assignment.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:].copy(), v[1:].copy()


# ---------------------------------------------------------------------------
# numba path

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def knn_numba(query, reference, k):
        nq = query.shape[0]
        nr = reference.shape[0]
        out = np.empty((nq, k), dtype=np.int64)
        best = np.empty(k)
        for i in range(nq):
            filled = 0
            for j in range(nr):
                dx = query[i, 0] - reference[j, 0]
                dy = query[i, 1] - reference[j, 1]
                dz = query[i, 2] - reference[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if filled == k and d >= best[k - 1]:
                    continue
                # insertion keeps earlier (lower) indices ahead on ties
                pos = filled if filled < k else k - 1
                while pos > 0 and best[pos - 1] > d:
                    best[pos] = best[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                    pos -= 1
                best[pos] = d
                out[i, pos] = j
                if filled < k:
                    filled += 1
        return out

    @numba.njit(cache=True)
    def nearest_numba(query, reference):
        nq = query.shape[0]
        nr = reference.shape[0]
        dist = np.empty(nq)
        idx = np.empty(nq, dtype=np.int64)
        for i in range(nq):
            bd = np.inf
            bj = 0
            for j in range(nr):
                dx = query[i, 0] - reference[j, 0]
                dy = query[i, 1] - reference[j, 1]
                dz = query[i, 2] - reference[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < bd:
                    bd = d
                    bj = j
            dist[i] = bd
            idx[i] = bj
        return dist, idx

    @numba.njit(cache=True)
    def lap_numba(cost):
        n = cost.shape[0]
        u = np.zeros(n + 1)
        v = np.zeros(n + 1)
        p = np.zeros(n + 1, dtype=np.int64)
        way = np.zeros(n + 1, dtype=np.int64)
        minv = np.empty(n + 1)
        used = np.empty(n + 1, dtype=np.bool_)
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            minv[:] = np.inf
            used[:] = False
            while True:
                used[j0] = True
                i0 = p[j0]
                delta = np.inf
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
        col_of_row = np.empty(n, dtype=np.int64)
        for j in range(1, n + 1):
            col_of_row[p[j] - 1] = j - 1
        return col_of_row, u[1:].copy(), v[1:].copy()

else:  # pragma: no cover
    knn_numba = nearest_numba = lap_numba = None


def _as_points(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def knn_indices(query, reference, k, accel=None):
    """Indices of the ``k`` nearest reference points, ascending by distance."""
    accel = USE_NUMBA if accel is None else accel and _HAVE_NUMBA
    q, r = _as_points(query), _as_points(reference)
    if accel:
        return knn_numba(q, r, int(k))
    return knn_numpy(q, r, int(k))


def nearest(query, reference, accel=None):
    """Squared distance to, and index of, the nearest reference point."""
    accel = USE_NUMBA if accel is None else accel and _HAVE_NUMBA
    q, r = _as_points(query), _as_points(reference)
    if accel:
        return nearest_numba(q, r)
    return nearest_numpy(q, r)


def lap_min(cost, accel=None):
    accel = USE_NUMBA if accel is None else accel and _HAVE_NUMBA
    c = np.ascontiguousarray(cost, dtype=np.float64)
    if accel:
        return lap_numba(c)
    return lap_numpy(c)
