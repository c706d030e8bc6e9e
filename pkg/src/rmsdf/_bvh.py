"""Bounding-volume hierarchy over triangles: first-hit ray casts and
closest-point queries, compiled with numba."""

import numpy as np
from numba import njit

LEAF_SIZE = 4
_STACK = 128


@njit(cache=True)
def _build(centroids, lo, hi):
    n = centroids.shape[0]
    order = np.arange(n)
    cap = 2 * n + 1
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    stack = np.empty(cap, np.int64)
    n_nodes = 1
    start[0] = 0
    count[0] = n
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        c = count[node]
        for a in range(3):
            node_lo[node, a] = np.inf
            node_hi[node, a] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for k in range(s, s + c):
            f = order[k]
            for a in range(3):
                node_lo[node, a] = min(node_lo[node, a], lo[f, a])
                node_hi[node, a] = max(node_hi[node, a], hi[f, a])
                clo[a] = min(clo[a], centroids[f, a])
                chi[a] = max(chi[a], centroids[f, a])
        if c <= LEAF_SIZE:
            continue
        axis = 0
        for a in range(1, 3):
            if chi[a] - clo[a] > chi[axis] - clo[axis]:
                axis = a
        seg = order[s:s + c].copy()
        keys = np.empty(c)
        for k in range(c):
            keys[k] = centroids[seg[k], axis]
        # Stable sort keeps the build deterministic for equal centroids.
        perm = np.argsort(keys, kind="mergesort")
        for k in range(c):
            order[s + k] = seg[perm[k]]
        half = c // 2
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        start[l_node] = s
        count[l_node] = half
        start[r_node] = s + half
        count[r_node] = c - half
        stack[sp] = l_node
        sp += 1
        stack[sp] = r_node
        sp += 1
    return (order, node_lo[:n_nodes].copy(), node_hi[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy())


class BVH:
    """Static BVH over the faces of a triangle mesh."""

    def __init__(self, vertices, faces):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        tri = self.vertices[self.faces]
        self.v0 = np.ascontiguousarray(tri[:, 0])
        self.v1 = np.ascontiguousarray(tri[:, 1])
        self.v2 = np.ascontiguousarray(tri[:, 2])
        if len(self.faces) == 0:
            self.nodes = None
            return
        self.nodes = _build(tri.mean(axis=1), tri.min(axis=1), tri.max(axis=1))

    def intersect(self, origins, directions, cull_backfaces=True):
        """First hit per ray. Returns ``(t, face, b1, b2)``; ``face = -1`` on miss.

        Equal hit distances resolve to the lower face index.
        """
        origins = np.ascontiguousarray(np.broadcast_to(origins, directions.shape), dtype=np.float64)
        directions = np.ascontiguousarray(directions, dtype=np.float64)
        n = len(directions)
        if self.nodes is None:
            return (np.full(n, np.inf), np.full(n, -1, np.int64), np.zeros(n), np.zeros(n))
        return _intersect(origins, directions, self.v0, self.v1, self.v2, *self.nodes, cull_backfaces)

    def closest(self, points):
        """Nearest surface point per query: ``(distance, face, point)``."""
        points = np.ascontiguousarray(points, dtype=np.float64)
        return _closest(points, self.v0, self.v1, self.v2, *self.nodes)


@njit(cache=True)
def _ray_box(o, inv, lo, hi, tmax):
    t0 = 0.0
    t1 = tmax
    for a in range(3):
        ta = (lo[a] - o[a]) * inv[a]
        tb = (hi[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@njit(cache=True)
def _intersect(origins, dirs, v0, v1, v2, order, node_lo, node_hi, left, right, start, count, cull):
    n = dirs.shape[0]
    out_t = np.full(n, np.inf)
    out_f = np.full(n, -1, np.int64)
    out_b1 = np.zeros(n)
    out_b2 = np.zeros(n)
    stack = np.empty(_STACK, np.int64)
    eps = 1e-12
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        inv = np.empty(3)
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else np.inf
        best_t = np.inf
        best_f = -1
        best_b1 = 0.0
        best_b2 = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _ray_box(o, inv, node_lo[node], node_hi[node], best_t * (1 + 1e-9) + 1e-12):
                continue
            if left[node] >= 0:
                stack[sp] = left[node]
                sp += 1
                stack[sp] = right[node]
                sp += 1
                continue
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                e1x = v1[f, 0] - v0[f, 0]
                e1y = v1[f, 1] - v0[f, 1]
                e1z = v1[f, 2] - v0[f, 2]
                e2x = v2[f, 0] - v0[f, 0]
                e2y = v2[f, 1] - v0[f, 1]
                e2z = v2[f, 2] - v0[f, 2]
                if cull:
                    nx = e1y * e2z - e1z * e2y
                    ny = e1z * e2x - e1x * e2z
                    nz = e1x * e2y - e1y * e2x
                    if nx * d[0] + ny * d[1] + nz * d[2] >= 0.0:
                        continue
                px = d[1] * e2z - d[2] * e2y
                py = d[2] * e2x - d[0] * e2z
                pz = d[0] * e2y - d[1] * e2x
                det = e1x * px + e1y * py + e1z * pz
                if det == 0.0:
                    continue
                idet = 1.0 / det
                tx = o[0] - v0[f, 0]
                ty = o[1] - v0[f, 1]
                tz = o[2] - v0[f, 2]
                b1 = (tx * px + ty * py + tz * pz) * idet
                if b1 < -eps or b1 > 1.0 + eps:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                b2 = (d[0] * qx + d[1] * qy + d[2] * qz) * idet
                if b2 < -eps or b1 + b2 > 1.0 + eps:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * idet
                if t <= 0.0:
                    continue
                if t < best_t or (t == best_t and f < best_f):
                    best_t = t
                    best_f = f
                    best_b1 = b1
                    best_b2 = b2
        out_t[r] = best_t
        out_f[r] = best_f
        out_b1[r] = best_b1
        out_b2[r] = best_b2
    return out_t, out_f, out_b1, out_b2


@njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5.
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + ab * (d1 / (d1 - d3))
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + ac * (d2 / (d2 - d6))
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)))
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


@njit(cache=True)
def _box_dist2(p, lo, hi):
    s = 0.0
    for a in range(3):
        if p[a] < lo[a]:
            s += (lo[a] - p[a]) ** 2
        elif p[a] > hi[a]:
            s += (p[a] - hi[a]) ** 2
    return s


@njit(cache=True)
def _closest(points, v0, v1, v2, order, node_lo, node_hi, left, right, start, count):
    n = points.shape[0]
    out_d = np.empty(n)
    out_f = np.empty(n, np.int64)
    out_p = np.empty((n, 3))
    stack = np.empty(_STACK, np.int64)
    for r in range(n):
        p = points[r]
        best = np.inf
        best_f = -1
        best_p = np.zeros(3)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, node_lo[node], node_hi[node]) >= best:
                continue
            if left[node] >= 0:
                dl = _box_dist2(p, node_lo[left[node]], node_hi[left[node]])
                dr = _box_dist2(p, node_lo[right[node]], node_hi[right[node]])
                if dl < dr:
                    stack[sp] = right[node]
                    sp += 1
                    stack[sp] = left[node]
                    sp += 1
                else:
                    stack[sp] = left[node]
                    sp += 1
                    stack[sp] = right[node]
                    sp += 1
                continue
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                q = _closest_on_triangle(p, v0[f], v1[f], v2[f])
                d2 = ((q - p) ** 2).sum()
                if d2 < best or (d2 == best and f < best_f):
                    best = d2
                    best_f = f
                    best_p = q
        out_d[r] = np.sqrt(best)
        out_f[r] = best_f
        out_p[r] = best_p
    return out_d, out_f, out_p
