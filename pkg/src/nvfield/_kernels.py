"""Compiled inner loops for nearest-point queries and lattice sign propagation."""

import numpy as np
from numba import njit


@njit(cache=True)
def closest_point_on_triangle(a, b, c, p):
    """Closest point to ``p`` on triangle ``abc`` (Ericson's region test)."""
    ab0 = b[0] - a[0]
    ab1 = b[1] - a[1]
    ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]
    ac1 = c[1] - a[1]
    ac2 = c[2] - a[2]
    n0 = ab1 * ac2 - ab2 * ac1
    n1 = ab2 * ac0 - ab0 * ac2
    n2 = ab0 * ac1 - ab1 * ac0
    if n0 * n0 + n1 * n1 + n2 * n2 == 0.0:
        # collinear or collapsed corners: the nearest point lies on an edge
        return _closest_on_edges(a, b, c, p)
    ap0 = p[0] - a[0]
    ap1 = p[1] - a[1]
    ap2 = p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    out = np.empty(3)
    if d1 <= 0.0 and d2 <= 0.0:
        out[0] = a[0]
        out[1] = a[1]
        out[2] = a[2]
        return out

    bp0 = p[0] - b[0]
    bp1 = p[1] - b[1]
    bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        out[0] = b[0]
        out[1] = b[1]
        out[2] = b[2]
        return out

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0] = a[0] + v * ab0
        out[1] = a[1] + v * ab1
        out[2] = a[2] + v * ab2
        return out

    cp0 = p[0] - c[0]
    cp1 = p[1] - c[1]
    cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        out[0] = c[0]
        out[1] = c[1]
        out[2] = c[2]
        return out

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0] = a[0] + w * ac0
        out[1] = a[1] + w * ac1
        out[2] = a[2] + w * ac2
        return out

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = b[0] + w * (c[0] - b[0])
        out[1] = b[1] + w * (c[1] - b[1])
        out[2] = b[2] + w * (c[2] - b[2])
        return out

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0] = a[0] + ab0 * v + ac0 * w
    out[1] = a[1] + ab1 * v + ac1 * w
    out[2] = a[2] + ab2 * v + ac2 * w
    return out


@njit(cache=True)
def _closest_on_segment(a, b, p):
    ab0 = b[0] - a[0]
    ab1 = b[1] - a[1]
    ab2 = b[2] - a[2]
    den = ab0 * ab0 + ab1 * ab1 + ab2 * ab2
    t = 0.0
    if den > 0.0:
        t = ((p[0] - a[0]) * ab0 + (p[1] - a[1]) * ab1 + (p[2] - a[2]) * ab2) / den
        t = min(1.0, max(0.0, t))
    out = np.empty(3)
    out[0] = a[0] + t * ab0
    out[1] = a[1] + t * ab1
    out[2] = a[2] + t * ab2
    return out


@njit(cache=True)
def _closest_on_edges(a, b, c, p):
    best = _closest_on_segment(a, b, p)
    for cand in (_closest_on_segment(b, c, p), _closest_on_segment(c, a, p)):
        if _sqdist(cand, p) < _sqdist(best, p):
            best = cand
    return best


@njit(cache=True)
def _sqdist(x, y):
    d0 = x[0] - y[0]
    d1 = x[1] - y[1]
    d2 = x[2] - y[2]
    return d0 * d0 + d1 * d1 + d2 * d2


@njit(cache=True)
def _box_sqdist(lo, hi, p):
    s = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            t = lo[k] - p[k]
            s += t * t
        elif p[k] > hi[k]:
            t = p[k] - hi[k]
            s += t * t
    return s


@njit(cache=True)
def brute_force_nearest(vertices, triangles, queries):
    m = queries.shape[0]
    closest = np.empty((m, 3))
    tri_out = np.empty(m, dtype=np.int64)
    sq_out = np.empty(m)
    for i in range(m):
        q = queries[i]
        best = np.inf
        best_t = -1
        best_p = np.zeros(3)
        for t in range(triangles.shape[0]):
            cp = closest_point_on_triangle(
                vertices[triangles[t, 0]], vertices[triangles[t, 1]], vertices[triangles[t, 2]], q
            )
            d = _sqdist(cp, q)
            if d < best:
                best = d
                best_t = t
                best_p = cp
        closest[i] = best_p
        tri_out[i] = best_t
        sq_out[i] = best
    return closest, tri_out, sq_out


@njit(cache=True)
def bvh_nearest(vertices, triangles, node_lo, node_hi, node_left, node_right,
                node_start, node_count, order, queries):
    m = queries.shape[0]
    closest = np.empty((m, 3))
    tri_out = np.empty(m, dtype=np.int64)
    sq_out = np.empty(m)
    stack = np.empty(128, dtype=np.int64)
    for i in range(m):
        q = queries[i]
        best = np.inf
        best_t = -1
        best_p = np.zeros(3)
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # ties must still be visited so the lowest triangle index wins
            if _box_sqdist(node_lo[node], node_hi[node], q) > best:
                continue
            if node_left[node] < 0:
                s = node_start[node]
                for j in range(s, s + node_count[node]):
                    t = order[j]
                    cp = closest_point_on_triangle(
                        vertices[triangles[t, 0]], vertices[triangles[t, 1]],
                        vertices[triangles[t, 2]], q,
                    )
                    d = _sqdist(cp, q)
                    if d < best or (d == best and t < best_t):
                        best = d
                        best_t = t
                        best_p = cp
            else:
                l = node_left[node]
                r = node_right[node]
                dl = _box_sqdist(node_lo[l], node_hi[l], q)
                dr = _box_sqdist(node_lo[r], node_hi[r], q)
                # push the farther child first so the nearer one is searched first
                if dl <= dr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2
        closest[i] = best_p
        tri_out[i] = best_t
        sq_out[i] = best
    return closest, tri_out, sq_out


@njit(cache=True)
def flood_region(sign, conf, flip_x, flip_y, flip_z, labels, cid, queue_init):
    """Breadth-first pseudo-sign propagation with majority voting.

    ``flip_a[i, j, k]`` marks the edge between lattice ``(i, j, k)`` and its
    successor along axis ``a``. Unsigned lattices are assigned when first
    reached; each takes the majority of the votes ``s_nb * (-1 if flip else 1)``
    cast by its signed neighbours, falling back to the discovering
    neighbour's vote on a tie. Which lattices may be assigned and which
    neighbours vote depends on ``cid``:

    * ``cid >= 0``: only lattices labelled ``cid``, voting among themselves;
    * ``cid == -1``: only lattices labelled 0, every signed neighbour votes;
    * ``cid == -2``: any unsigned lattice, every signed neighbour votes.

    Returns the number of lattices whose votes were not unanimous.
    """
    nx, ny, nz = sign.shape
    n = nx * ny * nz
    queue = np.empty(n + len(queue_init), dtype=np.int64)
    tail = 0
    for v in queue_init:
        queue[tail] = v
        tail += 1
    head = 0
    conflicts = 0
    di = np.array([-1, 1, 0, 0, 0, 0])
    dj = np.array([0, 0, -1, 1, 0, 0])
    dk = np.array([0, 0, 0, 0, -1, 1])
    while head < tail:
        cur = queue[head]
        head += 1
        ci = cur // (ny * nz)
        cj = (cur // nz) % ny
        ck = cur % nz
        for e in range(6):
            i = ci + di[e]
            j = cj + dj[e]
            k = ck + dk[e]
            if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
                continue
            if sign[i, j, k] != 0:
                continue
            if cid >= 0 and labels[i, j, k] != cid:
                continue
            if cid == -1 and labels[i, j, k] != 0:
                continue
            provisional = sign[ci, cj, ck] * (-1 if _edge_flip(flip_x, flip_y, flip_z, ci, cj, ck, e) else 1)
            votes = 0
            total = 0
            for f in range(6):
                a = i + di[f]
                b = j + dj[f]
                c = k + dk[f]
                if a < 0 or b < 0 or c < 0 or a >= nx or b >= ny or c >= nz:
                    continue
                if sign[a, b, c] == 0:
                    continue
                if cid >= 0 and labels[a, b, c] != cid:
                    continue
                votes += sign[a, b, c] * (-1 if _edge_flip(flip_x, flip_y, flip_z, i, j, k, f) else 1)
                total += 1
            if votes > 0:
                s = 1
            elif votes < 0:
                s = -1
            else:
                s = provisional
            agree = (total + s * votes) // 2
            if agree != total:
                conflicts += 1
            sign[i, j, k] = s
            conf[i, j, k] = agree
            queue[tail] = (i * ny + j) * nz + k
            tail += 1
    return conflicts


@njit(cache=True)
def component_orientation(sign, flip_x, flip_y, flip_z, labels, n_labels):
    """Net agreement of each labelled component with its signed label-0 neighbours."""
    nx, ny, nz = sign.shape
    score = np.zeros(n_labels + 1, dtype=np.int64)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                la = labels[i, j, k]
                for axis in range(3):
                    a, b, c = i, j, k
                    if axis == 0:
                        a += 1
                    elif axis == 1:
                        b += 1
                    else:
                        c += 1
                    if a >= nx or b >= ny or c >= nz:
                        continue
                    lb = labels[a, b, c]
                    if (la == 0) == (lb == 0):
                        continue
                    if sign[i, j, k] == 0 or sign[a, b, c] == 0:
                        continue
                    if axis == 0:
                        fl = flip_x[i, j, k]
                    elif axis == 1:
                        fl = flip_y[i, j, k]
                    else:
                        fl = flip_z[i, j, k]
                    v = sign[i, j, k] * sign[a, b, c] * (-1 if fl else 1)
                    score[la if la != 0 else lb] += v
    return score


@njit(cache=True)
def _edge_flip(flip_x, flip_y, flip_z, i, j, k, e):
    # e indexes (-x, +x, -y, +y, -z, +z) from lattice (i, j, k)
    if e == 0:
        return flip_x[i - 1, j, k]
    if e == 1:
        return flip_x[i, j, k]
    if e == 2:
        return flip_y[i, j - 1, k]
    if e == 3:
        return flip_y[i, j, k]
    if e == 4:
        return flip_z[i, j, k - 1]
    return flip_z[i, j, k]


@njit(cache=True)
def _edge_value(arr_x, arr_y, arr_z, i, j, k, e):
    if e == 0:
        return arr_x[i - 1, j, k]
    if e == 1:
        return arr_x[i, j, k]
    if e == 2:
        return arr_y[i, j - 1, k]
    if e == 3:
        return arr_y[i, j, k]
    if e == 4:
        return arr_z[i, j, k - 1]
    return arr_z[i, j, k]


@njit(cache=True)
def _heap_push(keys, vals, src, size, key, val, s):
    pos = size
    while pos > 0:
        parent = (pos - 1) // 2
        # max-heap; equal keys resolved toward the lower lattice index
        if keys[parent] > key or (keys[parent] == key and vals[parent] <= val):
            break
        keys[pos] = keys[parent]
        vals[pos] = vals[parent]
        src[pos] = src[parent]
        pos = parent
    keys[pos] = key
    vals[pos] = val
    src[pos] = s
    return size + 1


@njit(cache=True)
def _heap_pop(keys, vals, src, size):
    top_v = vals[0]
    top_s = src[0]
    size -= 1
    key = keys[size]
    val = vals[size]
    s = src[size]
    pos = 0
    while True:
        c = 2 * pos + 1
        if c >= size:
            break
        if c + 1 < size and (keys[c + 1] > keys[c] or (keys[c + 1] == keys[c] and vals[c + 1] < vals[c])):
            c += 1
        if key > keys[c] or (key == keys[c] and val <= vals[c]):
            break
        keys[pos] = keys[c]
        vals[pos] = vals[c]
        src[pos] = src[c]
        pos = c
    if size > 0:
        keys[pos] = key
        vals[pos] = val
        src[pos] = s
    return top_v, top_s, size


@njit(cache=True)
def _push_neighbours(keys, vals, src, size, sign, labels, cid, qual_x, qual_y, qual_z, cur):
    nx, ny, nz = sign.shape
    ci = cur // (ny * nz)
    cj = (cur // nz) % ny
    ck = cur % nz
    for e in range(6):
        i = ci + (e == 1) - (e == 0)
        j = cj + (e == 3) - (e == 2)
        k = ck + (e == 5) - (e == 4)
        if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
            continue
        if sign[i, j, k] != 0:
            continue
        if cid >= 0 and labels[i, j, k] != cid:
            continue
        if cid == -1 and labels[i, j, k] != 0:
            continue
        q = _edge_value(qual_x, qual_y, qual_z, ci, cj, ck, e)
        size = _heap_push(keys, vals, src, size, q, (i * ny + j) * nz + k, cur)
    return size


@njit(cache=True)
def guided_flood(sign, conf, flip_x, flip_y, flip_z, qual_x, qual_y, qual_z, labels, cid, seeds):
    """Pseudo-sign propagation along the most reliable edges first.

    Same voting rule and ``cid`` semantics as :func:`flood_region`, but the
    frontier is a max-heap keyed by edge quality instead of a FIFO queue, so
    signs cross the surface through the edges whose flip verdict is most
    trustworthy before they can leak through doubtful ones.
    Returns the number of lattices whose votes were not unanimous.
    """
    nx, ny, nz = sign.shape
    eligible = 0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if sign[i, j, k] != 0:
                    continue
                if cid >= 0 and labels[i, j, k] != cid:
                    continue
                if cid == -1 and labels[i, j, k] != 0:
                    continue
                eligible += 1
    # every lattice is assigned once and pushes at most six neighbours
    cap = 6 * (eligible + len(seeds)) + 1
    keys = np.empty(cap)
    vals = np.empty(cap, dtype=np.int64)
    src = np.empty(cap, dtype=np.int64)
    size = 0
    di = np.array([-1, 1, 0, 0, 0, 0])
    dj = np.array([0, 0, -1, 1, 0, 0])
    dk = np.array([0, 0, 0, 0, -1, 1])
    conflicts = 0
    for t in range(len(seeds)):
        size = _push_neighbours(keys, vals, src, size, sign, labels, cid, qual_x, qual_y, qual_z, seeds[t])
    while size > 0:
        cur, s_from, size = _heap_pop(keys, vals, src, size)
        ci = cur // (ny * nz)
        cj = (cur // nz) % ny
        ck = cur % nz
        if sign[ci, cj, ck] != 0:
            continue
        # the guiding vote comes through the edge from the lattice that pushed this one
        e_back = 0
        for f in range(6):
            if ((ci + di[f]) * ny + cj + dj[f]) * nz + ck + dk[f] == s_from:
                e_back = f
        provisional = sign.flat[s_from] * (-1 if _edge_flip(flip_x, flip_y, flip_z, ci, cj, ck, e_back) else 1)
        votes = 0
        total = 0
        for f in range(6):
            a = ci + di[f]
            b = cj + dj[f]
            c = ck + dk[f]
            if a < 0 or b < 0 or c < 0 or a >= nx or b >= ny or c >= nz:
                continue
            if sign[a, b, c] == 0:
                continue
            if cid >= 0 and labels[a, b, c] != cid:
                continue
            votes += sign[a, b, c] * (-1 if _edge_flip(flip_x, flip_y, flip_z, ci, cj, ck, f) else 1)
            total += 1
        if votes > 0:
            s = 1
        elif votes < 0:
            s = -1
        else:
            s = provisional
        agree = (total + s * votes) // 2
        if agree != total:
            conflicts += 1
        sign[ci, cj, ck] = s
        conf[ci, cj, ck] = agree
        size = _push_neighbours(keys, vals, src, size, sign, labels, cid, qual_x, qual_y, qual_z, cur)
    return conflicts
