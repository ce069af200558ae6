# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``hybridflow._fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


# ---------------------------------------------------------------------------
# binary min-heap keyed on (distance, node); ties resolve to the smaller node

cdef struct HeapItem:
    double key
    Py_ssize_t node


cdef inline bint _less(HeapItem a, HeapItem b) nogil:
    return a.key < b.key or (a.key == b.key and a.node < b.node)


cdef class _Heap:
    cdef HeapItem[::1] items
    cdef object _buf
    cdef Py_ssize_t size

    def __cinit__(self, Py_ssize_t capacity):
        self._buf = np.empty(max(capacity, 16), dtype=[("key", np.float64), ("node", np.intp)])
        self.items = self._buf
        self.size = 0

    cdef void push(self, double key, Py_ssize_t node):
        cdef Py_ssize_t i, parent
        cdef HeapItem item
        if self.size == self.items.shape[0]:
            self._buf = np.concatenate([self._buf, np.empty_like(self._buf)])
            self.items = self._buf
        item.key = key
        item.node = node
        i = self.size
        self.size += 1
        while i > 0:
            parent = (i - 1) >> 1
            if _less(item, self.items[parent]):
                self.items[i] = self.items[parent]
                i = parent
            else:
                break
        self.items[i] = item

    cdef HeapItem pop(self):
        cdef HeapItem top = self.items[0]
        cdef HeapItem last
        cdef Py_ssize_t i = 0, child, n
        self.size -= 1
        n = self.size
        if n > 0:
            last = self.items[n]
            while True:
                child = 2 * i + 1
                if child >= n:
                    break
                if child + 1 < n and _less(self.items[child + 1], self.items[child]):
                    child += 1
                if _less(self.items[child], last):
                    self.items[i] = self.items[child]
                    i = child
                else:
                    break
            self.items[i] = last
        return top


# ---------------------------------------------------------------------------


def geodesic_voronoi(double[:, ::1] cost, Py_ssize_t[::1] seed_ys, Py_ssize_t[::1] seed_xs,
                     double eps):
    """Multi-source Dijkstra on the 8-connected pixel grid.

    Step cost between neighbours p, q is ``|p - q| * (eps + (cost[p] + cost[q]) / 2)``.
    Returns ``(dist, label)`` where ``label`` is the index of the nearest seed.
    """
    cdef Py_ssize_t h = cost.shape[0], w = cost.shape[1]
    cdef Py_ssize_t n = seed_ys.shape[0]
    dist_arr = np.full((h, w), np.inf)
    label_arr = np.full((h, w), -1, dtype=np.int32)
    done_arr = np.zeros((h, w), dtype=np.uint8)
    cdef double[:, ::1] dist = dist_arr
    cdef int[:, ::1] label = label_arr
    cdef unsigned char[:, ::1] done = done_arr
    cdef _Heap heap = _Heap(h * w + n)
    cdef Py_ssize_t i, y, x, ny, nx, k
    cdef double d, nd, step
    cdef HeapItem item
    cdef int dys[8]
    cdef int dxs[8]
    cdef double lens[8]
    dys[:] = [-1, 1, 0, 0, -1, -1, 1, 1]
    dxs[:] = [0, 0, -1, 1, -1, 1, -1, 1]
    lens[:] = [1.0, 1.0, 1.0, 1.0, sqrt(2.0), sqrt(2.0), sqrt(2.0), sqrt(2.0)]

    for i in range(n):
        y = seed_ys[i]
        x = seed_xs[i]
        if dist[y, x] > 0.0:
            dist[y, x] = 0.0
            label[y, x] = <int>i
            heap.push(0.0, y * w + x)
    while heap.size > 0:
        item = heap.pop()
        y = item.node // w
        x = item.node % w
        if done[y, x]:
            continue
        done[y, x] = 1
        d = item.key
        for k in range(8):
            ny = y + dys[k]
            nx = x + dxs[k]
            if ny < 0 or ny >= h or nx < 0 or nx >= w or done[ny, nx]:
                continue
            step = lens[k] * (eps + 0.5 * (cost[y, x] + cost[ny, nx]))
            nd = d + step
            if nd < dist[ny, nx]:
                dist[ny, nx] = nd
                label[ny, nx] = label[y, x]
                heap.push(nd, ny * w + nx)
    return dist_arr, label_arr


def seed_knn(Py_ssize_t n_nodes, Py_ssize_t[::1] indptr, Py_ssize_t[::1] indices,
             double[::1] weights, Py_ssize_t k):
    """``k`` nearest nodes (itself included) of every node of a weighted graph.

    The graph is given in CSR form. Unreached slots hold ``-1`` and ``inf``.
    """
    nbr_arr = np.full((n_nodes, k), -1, dtype=np.int64)
    nd_arr = np.full((n_nodes, k), np.inf)
    cdef long long[:, ::1] nbr = nbr_arr
    cdef double[:, ::1] nbd = nd_arr
    best_arr = np.full(n_nodes, np.inf)
    stamp_arr = np.full(n_nodes, -1, dtype=np.intp)
    done_arr = np.full(n_nodes, -1, dtype=np.intp)
    cdef double[::1] best = best_arr
    cdef Py_ssize_t[::1] stamp = stamp_arr
    cdef Py_ssize_t[::1] done = done_arr
    cdef _Heap heap = _Heap(64)
    cdef Py_ssize_t s, found, u, j, v
    cdef double d, nd
    cdef HeapItem item
    for s in range(n_nodes):
        heap.size = 0
        best[s] = 0.0
        stamp[s] = s
        heap.push(0.0, s)
        found = 0
        while heap.size > 0 and found < k:
            item = heap.pop()
            u = item.node
            if done[u] == s:
                continue
            done[u] = s
            d = item.key
            nbr[s, found] = u
            nbd[s, found] = d
            found += 1
            for j in range(indptr[u], indptr[u + 1]):
                v = indices[j]
                if done[v] == s:
                    continue
                nd = d + weights[j]
                if stamp[v] != s or nd < best[v]:
                    stamp[v] = s
                    best[v] = nd
                    heap.push(nd, v)
    return nbr_arr, nd_arr


def label_components(int[:, ::1] labels, cnp.uint8_t[:, ::1] mask):
    """4-connected components of equal label inside ``mask``.

    Components are numbered in raster order of their first pixel; pixels
    outside the mask get ``-1``. Returns ``(components, count)``.
    """
    cdef Py_ssize_t h = labels.shape[0], w = labels.shape[1]
    comp_arr = np.full((h, w), -1, dtype=np.int32)
    cdef int[:, ::1] comp = comp_arr
    stack_arr = np.empty(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    cdef Py_ssize_t y, x, top, p, py, px, ny, nx, k
    cdef int ncomp = 0, lab
    cdef int dys[4]
    cdef int dxs[4]
    dys[:] = [-1, 1, 0, 0]
    dxs[:] = [0, 0, -1, 1]
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or comp[y, x] >= 0:
                continue
            lab = labels[y, x]
            comp[y, x] = ncomp
            top = 0
            stack[top] = y * w + x
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                py = p // w
                px = p % w
                for k in range(4):
                    ny = py + dys[k]
                    nx = px + dxs[k]
                    if ny < 0 or ny >= h or nx < 0 or nx >= w:
                        continue
                    if mask[ny, nx] and comp[ny, nx] < 0 and labels[ny, nx] == lab:
                        comp[ny, nx] = ncomp
                        stack[top] = ny * w + nx
                        top += 1
            ncomp += 1
    return comp_arr, ncomp


def sor_red_black(double[:, ::1] du, double[:, ::1] dv,
                  double[:, ::1] a11, double[:, ::1] a12, double[:, ::1] a22,
                  double[:, ::1] b1, double[:, ::1] b2,
                  double[:, ::1] wx, double[:, ::1] wy,
                  double[:, ::1] u, double[:, ::1] v,
                  double alpha, double omega, int iterations):
    """Red-black SOR on the coupled (du, dv) system, in place.

    Row equation for ``du`` at pixel p::

        a11 du + a12 dv + b1 + alpha * sum_q w_pq ((u_p + du_p) - (u_q + du_q)) = 0

    ``wx[y, x]`` weights the edge (y, x)-(y, x+1) and ``wy[y, x]`` the edge
    (y, x)-(y+1, x).
    """
    cdef Py_ssize_t h = du.shape[0], w = du.shape[1]
    cdef Py_ssize_t it, color, y, x, x0
    cdef double wsum, su, sv, wq, num, den, new
    for it in range(iterations):
        for color in range(2):
            for y in range(h):
                x0 = (y + color) & 1
                for x in range(x0, w, 2):
                    wsum = 0.0
                    su = 0.0
                    sv = 0.0
                    if x > 0:
                        wq = wx[y, x - 1]
                        wsum += wq
                        su += wq * (u[y, x - 1] + du[y, x - 1])
                        sv += wq * (v[y, x - 1] + dv[y, x - 1])
                    if x < w - 1:
                        wq = wx[y, x]
                        wsum += wq
                        su += wq * (u[y, x + 1] + du[y, x + 1])
                        sv += wq * (v[y, x + 1] + dv[y, x + 1])
                    if y > 0:
                        wq = wy[y - 1, x]
                        wsum += wq
                        su += wq * (u[y - 1, x] + du[y - 1, x])
                        sv += wq * (v[y - 1, x] + dv[y - 1, x])
                    if y < h - 1:
                        wq = wy[y, x]
                        wsum += wq
                        su += wq * (u[y + 1, x] + du[y + 1, x])
                        sv += wq * (v[y + 1, x] + dv[y + 1, x])
                    den = a11[y, x] + alpha * wsum
                    if den > 0.0:
                        num = -b1[y, x] - a12[y, x] * dv[y, x] + alpha * (su - wsum * u[y, x])
                        new = num / den
                        du[y, x] = (1.0 - omega) * du[y, x] + omega * new
                    den = a22[y, x] + alpha * wsum
                    if den > 0.0:
                        num = -b2[y, x] - a12[y, x] * du[y, x] + alpha * (sv - wsum * v[y, x])
                        new = num / den
                        dv[y, x] = (1.0 - omega) * dv[y, x] + omega * new
