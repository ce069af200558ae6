import heapq

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from hybridflow import _fallback, kernels

try:
    from hybridflow import _kernels
except ImportError:  # extension not built
    _kernels = None

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled kernels not built")


def dijkstra_oracle(cost, seeds, eps):
    """Plain 8-neighbour Dijkstra from every seed at once."""
    h, w = cost.shape
    dist = np.full((h, w), np.inf)
    heap = []
    for y, x in seeds:
        dist[y, x] = 0.0
        heap.append((0.0, y, x))
    heapq.heapify(heap)
    while heap:
        d, y, x = heapq.heappop(heap)
        if d > dist[y, x]:
            continue
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if (dy or dx) and 0 <= ny < h and 0 <= nx < w:
                    step = np.hypot(dy, dx) * (eps + 0.5 * (cost[y, x] + cost[ny, nx]))
                    if d + step < dist[ny, nx]:
                        dist[ny, nx] = d + step
                        heapq.heappush(heap, (d + step, ny, nx))
    return dist


def test_backend_reported():
    assert kernels.BACKEND in ("python", "cython")


def test_geodesic_matches_dijkstra(impl):
    rng = np.random.default_rng(3)
    cost = rng.random((17, 23))
    seeds = [(0, 0), (8, 11), (16, 22), (3, 19)]
    ys = np.array([s[0] for s in seeds], dtype=np.intp)
    xs = np.array([s[1] for s in seeds], dtype=np.intp)
    dist, label = impl.geodesic_voronoi(cost, ys, xs, 0.01)
    np.testing.assert_allclose(dist, dijkstra_oracle(cost, seeds, 0.01), rtol=1e-12, atol=1e-12)
    for k, (y, x) in enumerate(seeds):
        assert label[y, x] == k and dist[y, x] == 0.0
    # each pixel's label is a seed attaining the minimum distance
    per_seed = np.stack([dijkstra_oracle(cost, [s], 0.01) for s in seeds])
    got = np.take_along_axis(per_seed, label[None].astype(np.int64), 0)[0]
    np.testing.assert_allclose(got, per_seed.min(axis=0), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_geodesic_bound_uniform_cost(h, w, seed):
    rng = np.random.default_rng(seed)
    c = float(rng.random())
    cost = np.full((h, w), c)
    ys = np.array([rng.integers(h)], dtype=np.intp)
    xs = np.array([rng.integers(w)], dtype=np.intp)
    dist, _ = _fallback.geodesic_voronoi(cost, ys, xs, 0.01)
    yy, xx = np.mgrid[0:h, 0:w]
    eu = np.hypot(yy - ys[0], xx - xs[0])
    # octile paths overshoot the straight line by at most 1.0824
    assert np.all(dist <= eu * (0.01 + c) * 1.0824 + 1e-9)
    assert np.all(dist >= eu * (0.01 + c) - 1e-9)


@needs_ext
def test_geodesic_backends_agree():
    rng = np.random.default_rng(5)
    cost = rng.random((40, 31))
    ys = rng.integers(0, 40, 12).astype(np.intp)
    xs = rng.integers(0, 31, 12).astype(np.intp)
    d1, l1 = _fallback.geodesic_voronoi(cost, ys, xs, 0.01)
    d2, l2 = _kernels.geodesic_voronoi(cost, ys, xs, 0.01)
    np.testing.assert_allclose(d1, d2, rtol=1e-12, atol=1e-12)
    # labels may differ only on exact ties
    np.testing.assert_allclose(
        dijkstra_oracle(cost, list(zip(ys, xs)), 0.01), d2, rtol=1e-12, atol=1e-12)
    assert (l1 == l2).mean() > 0.99


def _random_graph(rng, n, p):
    rows, cols, vals = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                wgt = float(rng.random()) + 0.01
                rows += [i, j]
                cols += [j, i]
                vals += [wgt, wgt]
    from scipy import sparse

    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def test_seed_knn_matches_floyd(impl):
    from scipy.sparse import csgraph

    rng = np.random.default_rng(11)
    g = _random_graph(rng, 30, 0.15)
    k = 6
    nbr, nbd = impl.seed_knn(30, g.indptr.astype(np.intp), g.indices.astype(np.intp),
                             g.data.astype(np.float64), k)
    full = csgraph.floyd_warshall(g, directed=False)
    for s in range(30):
        expect = np.sort(full[s])[:k]
        got = nbd[s]
        np.testing.assert_allclose(got[np.isfinite(got)], expect[np.isfinite(expect)][: np.isfinite(got).sum()],
                                   rtol=1e-12)
        assert nbr[s, 0] == s and nbd[s, 0] == 0.0
        ok = nbr[s] >= 0
        np.testing.assert_allclose(full[s, nbr[s, ok]], nbd[s, ok], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 15), st.integers(1, 15), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_label_components_oracle(h, w, nlab, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, nlab, (h, w)).astype(np.int32)
    mask = rng.random((h, w)) < 0.8
    for impl in [m for m in (_fallback, _kernels) if m is not None]:
        comp, n = impl.label_components(labels, mask.astype(np.uint8))
        comp = np.asarray(comp)
        assert (comp[~mask] == -1).all()
        expect = sum(ndimage.label(mask & (labels == v))[1] for v in np.unique(labels[mask]))
        assert n == expect
        for c in range(n):
            sel = comp == c
            assert len(np.unique(labels[sel])) == 1
            assert ndimage.label(sel)[1] == 1
        # raster order of first pixels
        firsts = [np.flatnonzero(comp.ravel() == c)[0] for c in range(n)]
        assert firsts == sorted(firsts)


def _sor_inputs(seed, h=12, w=15):
    rng = np.random.default_rng(seed)
    a11 = rng.random((h, w)) + 0.1
    a22 = rng.random((h, w)) + 0.1
    a12 = 0.3 * rng.standard_normal((h, w)) * np.sqrt(a11 * a22) / 2
    b1, b2 = rng.standard_normal((2, h, w))
    wx = rng.random((h, w - 1)) + 0.1
    wy = rng.random((h - 1, w)) + 0.1
    u, v = rng.standard_normal((2, h, w))
    return a11, a12, a22, b1, b2, wx, wy, u, v


def test_sor_solves_linear_system(impl):
    a11, a12, a22, b1, b2, wx, wy, u, v = _sor_inputs(2)
    h, w = a11.shape
    alpha = 0.7
    du = np.zeros((h, w))
    dv = np.zeros((h, w))
    impl.sor_red_black(du, dv, a11, a12, a22, b1, b2, wx, wy, u, v, alpha, 1.5, 400)
    # residual of the Euler-Lagrange system
    lap = lambda f: _fallback._neighbor_sums(f, wx, wy) - _wsum(wx, wy) * f  # noqa: E731
    r1 = a11 * du + a12 * dv + b1 - alpha * lap(u + du)
    r2 = a12 * du + a22 * dv + b2 - alpha * lap(v + dv)
    assert np.abs(r1).max() < 1e-8 and np.abs(r2).max() < 1e-8


def _wsum(wx, wy):
    h, w = wy.shape[0] + 1, wx.shape[1] + 1
    s = np.zeros((h, w))
    s[:, :-1] += wx
    s[:, 1:] += wx
    s[:-1, :] += wy
    s[1:, :] += wy
    return s


@needs_ext
def test_sor_backends_agree():
    a11, a12, a22, b1, b2, wx, wy, u, v = _sor_inputs(9)
    out = []
    for impl in (_fallback, _kernels):
        du = np.zeros_like(a11)
        dv = np.zeros_like(a11)
        impl.sor_red_black(du, dv, a11, a12, a22, b1, b2, wx, wy, u, v, 2.0, 1.85, 7)
        out.append((du, dv))
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-10, atol=1e-12)
