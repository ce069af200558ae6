"""Pure-Python / numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import heapq

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

_OFFSETS = [(0, 1, 1.0), (1, 0, 1.0), (1, 1, np.sqrt(2.0)), (1, -1, np.sqrt(2.0))]


def geodesic_voronoi(cost, seed_ys, seed_xs, eps):
    cost = np.asarray(cost, dtype=np.float64)
    h, w = cost.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for dy, dx, length in _OFFSETS:
        ys = slice(0, h - dy)
        yd = slice(dy, h)
        if dx >= 0:
            xs, xd = slice(0, w - dx), slice(dx, w)
        else:
            xs, xd = slice(-dx, w), slice(0, w + dx)
        a = idx[ys, xs].ravel()
        b = idx[yd, xd].ravel()
        c = length * (eps + 0.5 * (cost[ys, xs].ravel() + cost[yd, xd].ravel()))
        rows.append(a)
        cols.append(b)
        vals.append(c)
    graph = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )
    seeds = np.asarray(seed_ys) * w + np.asarray(seed_xs)
    uniq, first = np.unique(seeds, return_index=True)
    dist, _, sources = csgraph.dijkstra(
        graph, directed=False, indices=uniq, min_only=True, return_predecessors=True
    )
    seed_of_pixel = np.full(h * w, -1, dtype=np.int64)
    seed_of_pixel[uniq] = first
    label = np.where(sources >= 0, seed_of_pixel[np.maximum(sources, 0)], -1)
    return dist.reshape(h, w), label.reshape(h, w).astype(np.int32)


def seed_knn(n_nodes, indptr, indices, weights, k):
    nbr = np.full((n_nodes, k), -1, dtype=np.int64)
    nbd = np.full((n_nodes, k), np.inf)
    for s in range(n_nodes):
        heap = [(0.0, s)]
        best = {s: 0.0}
        done = set()
        found = 0
        while heap and found < k:
            d, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            nbr[s, found] = u
            nbd[s, found] = d
            found += 1
            for j in range(indptr[u], indptr[u + 1]):
                v = int(indices[j])
                if v in done:
                    continue
                nd = d + weights[j]
                if nd < best.get(v, np.inf):
                    best[v] = nd
                    heapq.heappush(heap, (nd, v))
    return nbr, nbd


def label_components(labels, mask):
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    comp = np.full(labels.shape, -1, dtype=np.int64)
    offset = 0
    for value in np.unique(labels[mask]):
        lab, n = ndimage.label(mask & (labels == value))
        hit = lab > 0
        comp[hit] = lab[hit] - 1 + offset
        offset += n
    # renumber by raster order of each component's first pixel
    flat = comp.ravel()
    inside = np.flatnonzero(flat >= 0)
    _, first = np.unique(flat[inside], return_index=True)
    order = np.argsort(inside[first], kind="stable")
    remap = np.empty(offset, dtype=np.int64)
    remap[order] = np.arange(offset)
    out = np.full(labels.shape, -1, dtype=np.int32)
    out.ravel()[inside] = remap[flat[inside]]
    return out, offset


def _neighbor_sums(field, wx, wy):
    s = np.zeros_like(field)
    s[:, :-1] += wx * field[:, 1:]
    s[:, 1:] += wx * field[:, :-1]
    s[:-1, :] += wy * field[1:, :]
    s[1:, :] += wy * field[:-1, :]
    return s


def sor_red_black(du, dv, a11, a12, a22, b1, b2, wx, wy, u, v, alpha, omega, iterations):
    h, w = du.shape
    wsum = np.zeros((h, w))
    wsum[:, :-1] += wx
    wsum[:, 1:] += wx
    wsum[:-1, :] += wy
    wsum[1:, :] += wy
    yy, xx = np.mgrid[0:h, 0:w]
    colors = [((yy + xx) & 1) == c for c in (0, 1)]
    den_u = a11 + alpha * wsum
    den_v = a22 + alpha * wsum
    ok_u = den_u > 0
    ok_v = den_v > 0
    safe_u = np.where(ok_u, den_u, 1.0)
    safe_v = np.where(ok_v, den_v, 1.0)
    for _ in range(iterations):
        for sel in colors:
            su = _neighbor_sums(u + du, wx, wy)
            new = (-b1 - a12 * dv + alpha * (su - wsum * u)) / safe_u
            m = sel & ok_u
            du[m] = (1.0 - omega) * du[m] + omega * new[m]
            sv = _neighbor_sums(v + dv, wx, wy)
            new = (-b2 - a12 * du + alpha * (sv - wsum * v)) / safe_v
            m = sel & ok_v
            dv[m] = (1.0 - omega) * dv[m] + omega * new[m]
