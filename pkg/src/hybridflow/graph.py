"""Matching graphs over superpixel centroids.

Edges come from a Delaunay triangulation built by incremental Bowyer-Watson
insertion. The triangulation carries a ghost vertex so that hull growth is
handled by the same cavity rule as interior insertion, and all geometric
decisions go through the exact predicates in :mod:`hybridflow.predicates`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .errors import ContractError
from .predicates import incircle, orient2d

GHOST = -1


class _Triangulation:
    """Bowyer-Watson triangulation with ghost triangles ``(u, v, GHOST)``.

    A real triangle ``(a, b, c)`` is counter-clockwise. A ghost triangle
    ``(u, v, GHOST)`` sits on hull edge ``u -> v`` with the outside on its left.
    """

    def __init__(self, pts: list[tuple[float, float]]):
        self.pts = pts
        self.tris: dict[int, tuple[int, int, int]] = {}
        self.edge_tri: dict[tuple[int, int], int] = {}
        self._next = 0
        self._last = None

    def _add(self, tri):
        t = self._next
        self._next += 1
        self.tris[t] = tri
        a, b, c = tri
        self.edge_tri[(a, b)] = t
        self.edge_tri[(b, c)] = t
        self.edge_tri[(c, a)] = t
        if GHOST not in tri:
            self._last = t
        return t

    def _remove(self, t):
        a, b, c = self.tris.pop(t)
        for e in ((a, b), (b, c), (c, a)):
            if self.edge_tri.get(e) == t:
                del self.edge_tri[e]

    def _conflict(self, t, p) -> bool:
        a, b, c = self.tris[t]
        P = self.pts
        if c == GHOST:
            o = orient2d(P[a], P[b], P[p])
            if o != 0:
                return o > 0
            # collinear with the hull edge: conflicts only on the open segment
            lo = min(P[a], P[b])
            hi = max(P[a], P[b])
            return lo < P[p] < hi
        return incircle(P[a], P[b], P[c], P[p]) > 0

    def _locate(self, p):
        """A triangle whose circumcircle contains ``p``, by a visibility walk."""
        P = self.pts
        t = self._last
        for _ in range(4 * len(self.tris) + 8):
            a, b, c = self.tris[t]
            moved = False
            for u, v in ((a, b), (b, c), (c, a)):
                if orient2d(P[u], P[v], P[p]) < 0:
                    t = self.edge_tri[(v, u)]
                    moved = True
                    break
            if not moved:
                return t
            if GHOST in self.tris[t]:
                return t
        for t in self.tris:  # pragma: no cover - walk cycles cannot occur on a Delaunay mesh
            if self._conflict(t, p):
                return t
        raise AssertionError("point location failed")

    def insert(self, p):
        start = self._locate(p)
        cavity = {start}
        stack = [start]
        while stack:
            t = stack.pop()
            a, b, c = self.tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                n = self.edge_tri.get((v, u))
                if n is not None and n not in cavity and self._conflict(n, p):
                    cavity.add(n)
                    stack.append(n)
        boundary = []
        for t in cavity:
            a, b, c = self.tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                if self.edge_tri.get((v, u)) not in cavity:
                    boundary.append((u, v))
        for t in cavity:
            self._remove(t)
        for u, v in sorted(boundary):
            if u == GHOST:
                self._add((v, p, GHOST))
            elif v == GHOST:
                self._add((p, u, GHOST))
            else:
                self._add((u, v, p))

    def edges(self):
        out = set()
        for a, b, c in self.tris.values():
            for u, v in ((a, b), (b, c), (c, a)):
                if u != GHOST and v != GHOST:
                    out.add((min(u, v), max(u, v)))
        return out


def delaunay(points) -> np.ndarray:
    """Delaunay edges of a planar point set.

    Parameters
    ----------
    points : array_like, shape (N, 2)
        ``(x, y)`` coordinates, N >= 2.

    Returns
    -------
    ndarray, shape (M, 2)
        Undirected edges ``(i, j)`` with ``i < j``, sorted lexicographically.
        Two points give one edge and collinear input gives the path along the
        line. Duplicate points are joined to their first occurrence.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 2:
        raise ContractError(f"delaunay needs at least 2 points, got {n}")
    if not np.isfinite(pts).all():
        raise ContractError("non-finite point coordinates")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    uniq_pts: list[tuple[float, float]] = []
    rep: list[int] = []
    extra = set()
    for idx in order:
        q = (float(pts[idx, 0]), float(pts[idx, 1]))
        if uniq_pts and uniq_pts[-1] == q:
            a, b = rep[-1], int(idx)
            extra.add((min(a, b), max(a, b)))
            continue
        uniq_pts.append(q)
        rep.append(int(idx))

    m = len(uniq_pts)
    local: set[tuple[int, int]] = set()
    apex = next((k for k in range(2, m) if orient2d(uniq_pts[0], uniq_pts[1], uniq_pts[k]) != 0), None)
    if apex is None:
        local = {(k, k + 1) for k in range(m - 1)}
    else:
        tri = _Triangulation(uniq_pts)
        a, b, c = 0, 1, apex
        if orient2d(uniq_pts[a], uniq_pts[b], uniq_pts[c]) < 0:
            b, c = c, b
        tri._add((a, b, c))
        tri._add((b, a, GHOST))
        tri._add((c, b, GHOST))
        tri._add((a, c, GHOST))
        for k in range(2, m):
            if k != apex:
                tri.insert(k)
        local = tri.edges()
    out = {(min(rep[i], rep[j]), max(rep[i], rep[j])) for i, j in local} | extra
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


def edge_geometry(pos: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Angle to the horizontal axis in ``[0, pi)`` and length of each edge."""
    d = pos[edges[:, 1]] - pos[edges[:, 0]]
    theta = np.mod(np.arctan2(d[:, 1], d[:, 0]), np.pi)
    theta[theta >= np.pi] = 0.0
    return theta, np.hypot(d[:, 0], d[:, 1])


@dataclass
class MatchGraph:
    """Graph of superpixel nodes with Delaunay edges.

    Attributes
    ----------
    pos : ndarray, shape (N, 2)
        Node centroids ``(x, y)``.
    descriptors : ndarray, shape (N, D)
        Mean descriptor of each node's pixels.
    colors : ndarray, shape (N, 6)
        Color means and standard deviations.
    ids : ndarray, shape (N,)
        Superpixel id of each node.
    edges : ndarray, shape (M, 2)
        Node index pairs with ``i < j``.
    theta, length : ndarray, shape (M,)
        Edge angle in ``[0, pi)`` and Euclidean length.
    """

    pos: np.ndarray
    descriptors: np.ndarray
    colors: np.ndarray
    ids: np.ndarray
    edges: np.ndarray
    theta: np.ndarray
    length: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.pos)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def incidence(self) -> sparse.csr_matrix:
        """Node-by-edge 0/1 matrix with two ones per column."""
        m = self.n_edges
        rows = self.edges.T.ravel()
        cols = np.tile(np.arange(m), 2)
        return sparse.csr_matrix((np.ones(2 * m, dtype=np.int8), (rows, cols)), shape=(self.n_nodes, m))

    def neighbors(self) -> list[np.ndarray]:
        adj = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return [np.array(sorted(a), dtype=np.int64) for a in adj]

    def with_positions(self, pos: np.ndarray) -> "MatchGraph":
        """Same topology and appearance with moved nodes."""
        pos = np.asarray(pos, dtype=np.float64)
        theta, length = edge_geometry(pos, self.edges)
        return replace(self, pos=pos, theta=theta, length=length)

    def to_text(self) -> str:
        lines = [f"nodes {self.n_nodes}"]
        lines += [f"{k} {int(self.ids[k])} {x:.6f} {y:.6f}" for k, (x, y) in enumerate(self.pos)]
        lines.append(f"edges {self.n_edges}")
        lines += [
            f"{int(i)} {int(j)} {t:.6f} {l:.6f}"
            for (i, j), t, l in zip(self.edges, self.theta, self.length)
        ]
        return "\n".join(lines) + "\n"


def graph_from_points(pos, descriptors=None, colors=None, ids=None) -> MatchGraph:
    """Build a graph directly from node positions and attributes."""
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    n = len(pos)
    descriptors = np.zeros((n, 1)) if descriptors is None else np.asarray(descriptors, dtype=np.float64)
    colors = np.zeros((n, 6)) if colors is None else np.asarray(colors, dtype=np.float64)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    edges = delaunay(pos) if n >= 2 else np.zeros((0, 2), dtype=np.int64)
    theta, length = edge_geometry(pos, edges)
    return MatchGraph(pos, descriptors, colors, ids, edges, theta, length)


def region_means(labels: np.ndarray, count: int, values: np.ndarray) -> np.ndarray:
    """Per-label mean of ``values`` (``(H, W, C)``) over pixels with label ``>= 0``."""
    flat = labels.ravel()
    sel = np.flatnonzero(flat >= 0)
    ind = sparse.csr_matrix(
        (np.ones(sel.size), (flat[sel], np.arange(sel.size))), shape=(count, sel.size)
    )
    vals = values.reshape(-1, values.shape[-1])[sel].astype(np.float64)
    sums = ind @ vals
    counts = np.asarray(ind.sum(axis=1)).ravel()
    return sums / counts[:, None]


def build_graph(spm, field: np.ndarray, image: np.ndarray) -> MatchGraph:
    """Graph over the superpixels of ``spm``.

    Node ``k`` is superpixel ``k``: its centroid, the mean of its pixel
    descriptors and its color statistics (channel means and population
    standard deviations).
    """
    if spm.count < 1:
        raise ContractError("superpixel map is empty")
    ys, xs = np.mgrid[0:spm.labels.shape[0], 0:spm.labels.shape[1]]
    coords = np.stack([xs, ys], axis=-1).astype(np.float64)
    pos = region_means(spm.labels, spm.count, coords)
    desc = region_means(spm.labels, spm.count, field)
    img = np.asarray(image, dtype=np.float64)
    mean = region_means(spm.labels, spm.count, img)
    sq = region_means(spm.labels, spm.count, img * img)
    # two-moment variance can dip below zero by rounding
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    g = graph_from_points(pos, desc, np.concatenate([mean, std], axis=1), np.arange(spm.count))
    return g
