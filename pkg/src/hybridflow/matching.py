"""Factorized graph matching by path following.

The pairwise affinity ``K`` of two graphs is never formed. It is carried by
the node affinity ``Ap`` (``N1 x N2``), edge affinities over undirected edge
pairs (``M1 x M2``) and the endpoint lists of both graphs, so every product
with ``K`` costs ``O(N1 N2 + M1 M2)``. For an assignment matrix ``X``::

    J(X) = sum(Ap * X**2) + 2 * sum(As * X[i, k] X[j, l] + Af * X[i, l] X[j, k])

where edge ``a = (i, j)`` of the first graph meets edge ``b = (k, l)`` of
the second, ``As`` scores the alignment ``i-k, j-l`` and ``Af`` the flipped
one. On 0/1 matrices this equals ``1_C^T K 1_C``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh
from scipy.spatial.distance import cdist

from .errors import ContractError
from .graph import MatchGraph


@dataclass
class MatchParams:
    """Graph-matching settings."""

    alpha_step: float = 0.01
    max_inner_iters: int = 30
    first_inner_iters: int = 200
    inner_tol: float = 1e-6
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6
    deformable: bool = True
    rounds: int = 4
    tau: float | None = None
    edge_alignment: str = "max"


# ---------------------------------------------------------------------------
# affinities


def node_affinity(f1: np.ndarray, f2: np.ndarray) -> float:
    """``exp(-|f1 - f2|_1)``."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise ContractError(f"descriptor shapes differ: {f1.shape} vs {f2.shape}")
    return float(np.exp(-np.abs(f1 - f2).sum()))


def angle_difference(t1, t2):
    """Difference of undirected angles, wrapped to ``[0, pi/2]``."""
    d = np.mod(np.abs(np.asarray(t1) - np.asarray(t2)), np.pi)
    return np.minimum(d, np.pi - d)


def length_difference(l1, l2):
    """``|l1 - l2| / mean(l1, l2)``, zero when both lengths vanish."""
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    mean = 0.5 * (l1 + l2)
    return np.divide(np.abs(l1 - l2), mean, out=np.zeros(np.broadcast(l1, l2).shape), where=mean > 0)


def edge_affinity(g1: MatchGraph, a: int, g2: MatchGraph, b: int, flip: bool = False) -> float:
    """``lambda_E`` of edge ``a`` of ``g1`` against edge ``b`` of ``g2``.

    Endpoints align as ``i-k, j-l`` for ``a = (i, j)``, ``b = (k, l)``, or
    ``i-l, j-k`` when ``flip`` is set.
    """
    i, j = g1.edges[a]
    k, l = g2.edges[b]
    if flip:
        k, l = l, k
    f1, f2, c1, c2 = g1.descriptors, g2.descriptors, g1.colors, g2.colors
    l1 = lambda u, v: float(np.abs(u - v).sum())
    phi = (
        l1(f1[i], f2[k]) + l1(f1[j], f2[l])
        + abs(l1(f1[i], f1[j]) - l1(f2[k], f2[l]))
        + l1(c1[i], c2[k]) + l1(c1[j], c2[l])
        + abs(l1(c1[i], c1[j]) - l1(c2[k], c2[l]))
    )
    de = float(angle_difference(g1.theta[a], g2.theta[b]))
    dl = float(length_difference(g1.length[a], g2.length[b]))
    return float(np.exp(-0.5 * (phi + de + dl)))


@dataclass
class AffinityFactors:
    """Factors of ``K`` for one graph pair (unpadded)."""

    node: np.ndarray
    same: np.ndarray
    flip: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    n1: int
    n2: int

    @property
    def shape(self):
        return self.n1, self.n2


def _edge_terms(g1: MatchGraph, g2: MatchGraph, dp: np.ndarray, dc: np.ndarray):
    i, j = g1.edges[:, 0], g1.edges[:, 1]
    k, l = g2.edges[:, 0], g2.edges[:, 1]
    inner1 = np.abs(g1.descriptors[i] - g1.descriptors[j]).sum(1)
    inner2 = np.abs(g2.descriptors[k] - g2.descriptors[l]).sum(1)
    cin1 = np.abs(g1.colors[i] - g1.colors[j]).sum(1)
    cin2 = np.abs(g2.colors[k] - g2.colors[l]).sum(1)
    phi2 = np.abs(inner1[:, None] - inner2[None, :]) + np.abs(cin1[:, None] - cin2[None, :])
    geo = angle_difference(g1.theta[:, None], g2.theta[None, :])
    geo = geo + length_difference(g1.length[:, None], g2.length[None, :])
    dsum = dp + dc
    same = dsum[np.ix_(i, k)] + dsum[np.ix_(j, l)]
    flip = dsum[np.ix_(i, l)] + dsum[np.ix_(j, k)]
    base = phi2 + geo
    return np.exp(-0.5 * (same + base)), np.exp(-0.5 * (flip + base))


def affinity_factors(g1: MatchGraph, g2: MatchGraph, alignment: str = "max",
                     node: np.ndarray | None = None) -> AffinityFactors:
    """Node and edge affinity matrices of a graph pair.

    ``alignment="max"`` scores an undirected edge pair by the better of its
    two endpoint alignments; ``"aligned"`` keeps each alignment separately.
    A precomputed ``node`` matrix can be passed when only geometry changed.
    """
    if g1.descriptors.shape[1] != g2.descriptors.shape[1]:
        raise ContractError("descriptor dimensions differ")
    dp = cdist(g1.descriptors, g2.descriptors, "cityblock")
    dc = cdist(g1.colors, g2.colors, "cityblock")
    if node is None:
        node = np.exp(-dp)
    if g1.n_edges and g2.n_edges:
        same, flip = _edge_terms(g1, g2, dp, dc)
    else:
        same = flip = np.zeros((g1.n_edges, g2.n_edges))
    if alignment == "max":
        same = flip = np.maximum(same, flip)
    elif alignment != "aligned":
        raise ContractError(f"unknown edge alignment {alignment!r}")
    for m in (node, same, flip):
        if not np.isfinite(m).all():
            raise ContractError("non-finite affinities")
    return AffinityFactors(node, same, flip, g1.edges, g2.edges, g1.n_nodes, g2.n_nodes)


def affinity_element(i: int, j: int, k: int, l: int, g1: MatchGraph, g2: MatchGraph,
                     alignment: str = "max") -> float:
    """One entry ``K[(i, k), (j, l)]`` evaluated directly from the graphs."""
    if i == j and k == l:
        return node_affinity(g1.descriptors[i], g2.descriptors[k])
    if i == j or k == l:
        return 0.0
    a = _find_edge(g1, i, j)
    b = _find_edge(g2, k, l)
    if a is None or b is None:
        return 0.0
    # orient edge b so that its first endpoint pairs with the first of a
    flipped = (g1.edges[a, 0] == i) != (g2.edges[b, 0] == k)
    value = edge_affinity(g1, a, g2, b, flip=flipped)
    if alignment == "max":
        value = max(value, edge_affinity(g1, a, g2, b, flip=not flipped))
    return value


def _find_edge(g: MatchGraph, i: int, j: int):
    lo, hi = min(i, j), max(i, j)
    hit = np.flatnonzero((g.edges[:, 0] == lo) & (g.edges[:, 1] == hi))
    return int(hit[0]) if hit.size else None


def explicit_k(g1: MatchGraph, g2: MatchGraph, alignment: str = "max") -> np.ndarray:
    """Materialized ``K`` of size ``N1 N2 x N1 N2``, row index ``i * N2 + k``."""
    n1, n2 = g1.n_nodes, g2.n_nodes
    K = np.zeros((n1 * n2, n1 * n2))
    for i in range(n1):
        for k in range(n2):
            for j in range(n1):
                for l in range(n2):
                    K[i * n2 + k, j * n2 + l] = affinity_element(i, j, k, l, g1, g2, alignment)
    return K


# ---------------------------------------------------------------------------
# factorized objective


class FactorizedObjective:
    """``J`` and its gradient on ``n x n`` matrices, dummy rows/columns padded."""

    def __init__(self, factors: AffinityFactors, n: int | None = None):
        n1, n2 = factors.shape
        self.n = n = max(n1, n2) if n is None else n
        self.node = np.zeros((n, n))
        self.node[:n1, :n2] = factors.node
        self.same = factors.same
        self.flip = factors.flip
        self.i, self.j = factors.e1[:, 0], factors.e1[:, 1]
        self.k, self.l = factors.e2[:, 0], factors.e2[:, 1]
        m1, m2 = len(self.i), len(self.k)
        self.has_edges = m1 > 0 and m2 > 0
        ones1 = np.ones(m1)
        ones2 = np.ones(m2)
        self.Si = sparse.csr_matrix((ones1, (self.i, np.arange(m1))), shape=(n, m1))
        self.Sj = sparse.csr_matrix((ones1, (self.j, np.arange(m1))), shape=(n, m1))
        self.SkT = sparse.csr_matrix((ones2, (np.arange(m2), self.k)), shape=(m2, n))
        self.SlT = sparse.csr_matrix((ones2, (np.arange(m2), self.l)), shape=(m2, n))
        # second-graph edges grouped by first / second endpoint
        self._by_k = self._group(self.k, n)
        self._by_l = self._group(self.l, n)

    @staticmethod
    def _group(nodes, n):
        order = np.argsort(nodes, kind="stable")
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(nodes, minlength=n), out=ptr[1:])
        return ptr, order

    def _pairs(self, targets, group):
        """All ``(a, b)`` with edge ``b`` listed under node ``targets[a]``."""
        ptr, order = group
        start = ptr[targets]
        count = ptr[targets + 1] - start
        total = int(count.sum())
        a = np.repeat(np.arange(len(targets)), count)
        offset = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
        return a, order[np.repeat(start, count) + offset]

    def _gathers(self, X):
        Xi, Xj = X[self.i], X[self.j]
        return Xi[:, self.k], Xj[:, self.l], Xi[:, self.l], Xj[:, self.k]

    def value(self, X: np.ndarray) -> float:
        v = float((self.node * X * X).sum())
        if self.has_edges:
            P, Q, R, S = self._gathers(X)
            v += 2.0 * float((self.same * P * Q).sum() + (self.flip * R * S).sum())
        return v

    def gradient(self, X: np.ndarray) -> np.ndarray:
        g = 2.0 * self.node * X
        if self.has_edges:
            P, Q, R, S = self._gathers(X)
            A, B = self.same, self.flip
            # d/dX of 2 * sum(A P Q + B R S); P = X[i, k], Q = X[j, l], R = X[i, l], S = X[j, k]
            g += 2.0 * np.asarray(
                self.Si @ ((A * Q) @ self.SkT) + self.Sj @ ((A * P) @ self.SlT)
                + self.Si @ ((B * S) @ self.SlT) + self.Sj @ ((B * R) @ self.SkT)
            )
        return g

    def perm_gradient(self, cols: np.ndarray) -> np.ndarray:
        """Gradient at the permutation matrix sending row ``p`` to ``cols[p]``.

        Only edge pairs whose endpoints are mapped onto each other contribute,
        so the cost is linear in the number of such pairs.
        """
        n = self.n
        g = np.zeros(n * n)
        rows = np.arange(n)
        g[rows * n + cols] = 2.0 * self.node[rows, cols]
        if self.has_edges:
            si, sj = cols[self.i], cols[self.j]
            # Q = X[j, l] = 1 -> A to (i, k); P = X[i, k] = 1 -> A to (j, l)
            # S = X[j, k] = 1 -> B to (i, l); R = X[i, l] = 1 -> B to (j, k)
            for targets, group, src, dst, W in (
                (sj, self._by_l, self.i, self.k, self.same),
                (si, self._by_k, self.j, self.l, self.same),
                (sj, self._by_k, self.i, self.l, self.flip),
                (si, self._by_l, self.j, self.k, self.flip),
            ):
                a, b = self._pairs(targets, group)
                g += 2.0 * np.bincount(src[a] * n + dst[b], weights=W[a, b], minlength=n * n)
        return g.reshape(n, n)

    def kx(self, X: np.ndarray) -> np.ndarray:
        """``K vec(X)`` reshaped to a matrix."""
        return 0.5 * self.gradient(X)

    def spectral_bound(self) -> float:
        """Largest eigenvalue of ``K`` (Lanczos, capped by the max row sum)."""
        n = self.n
        rowsum = float(self.kx(np.ones((n, n))).max())
        if n * n < 3:
            return rowsum
        op = LinearOperator((n * n, n * n), matvec=lambda x: self.kx(x.reshape(n, n)).ravel(),
                            dtype=np.float64)
        try:
            lam = float(eigsh(op, k=1, which="LA", tol=1e-6, v0=np.ones(n * n),
                              return_eigenvectors=False)[0])
        except ArpackNoConvergence:
            return rowsum
        return min(lam, rowsum)


# ---------------------------------------------------------------------------
# solvers


def sinkhorn(X: np.ndarray, iterations: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Alternate row and column normalization of a positive matrix."""
    X = np.array(X, dtype=np.float64)
    for _ in range(iterations):
        X /= X.sum(axis=1, keepdims=True)
        X /= X.sum(axis=0, keepdims=True)
        if np.abs(X.sum(axis=1) - 1.0).max() < tol:
            break
    return X


def assignment(W: np.ndarray) -> np.ndarray:
    """Permutation maximizing ``sum(W * P)``, as column index per row."""
    # row and column reduction leave the optimum unchanged and start the
    # solver from tighter duals, which helps on smooth gradient matrices
    C = W.max() - W
    C -= C.min(axis=1, keepdims=True)
    C -= C.min(axis=0, keepdims=True)
    _, cols = linear_sum_assignment(C)
    return cols


def _perm_matrix(cols: np.ndarray) -> np.ndarray:
    n = len(cols)
    P = np.zeros((n, n))
    P[np.arange(n), cols] = 1.0
    return P


@dataclass
class Correspondence:
    """Result of matching two graphs.

    ``soft`` is the padded ``N x N`` doubly-stochastic matrix and ``perm`` its
    discretization (column per row). ``discrete`` is the ``N1 x N2`` partial
    permutation obtained by dropping dummy rows and columns.
    """

    soft: np.ndarray
    perm: np.ndarray
    n1: int
    n2: int
    objective: float
    history: list = field(default_factory=list)

    @property
    def discrete(self) -> np.ndarray:
        C = np.zeros((self.n1, self.n2), dtype=np.int8)
        rows = np.arange(self.n1)
        cols = self.perm[: self.n1]
        ok = cols < self.n2
        C[rows[ok], cols[ok]] = 1
        return C

    def pairs(self) -> np.ndarray:
        """``(i, k)`` index pairs of real-to-real assignments."""
        cols = self.perm[: self.n1]
        rows = np.flatnonzero(cols < self.n2)
        return np.stack([rows, cols[rows]], axis=1)


class _State:
    """Iterate with its exact ``J`` and gradient carried along by linearity."""

    def __init__(self, obj: FactorizedObjective, X: np.ndarray):
        self.X = X
        self.grad = obj.gradient(X)
        self.value = obj.value(X)


def _frank_wolfe(obj: FactorizedObjective, st: _State, shift: float, iters: int, tol: float):
    """Maximize ``J(X) + shift * |X|^2`` over doubly-stochastic matrices.

    The linear oracle returns a permutation ``S``; ``J(S)`` and its gradient
    are cheap there, and since ``J`` is quadratic both the exact line search
    and the gradient update follow from them without touching ``X`` densely.
    """
    n = obj.n
    scale = max(abs(shift), abs(st.value) / n, 1e-12)
    rows = np.arange(n)
    for _ in range(iters):
        X = st.X
        G = st.grad + 2.0 * shift * X
        cols = assignment(G)
        gap = float(G[rows, cols].sum() - (G * X).sum())
        if gap <= tol * scale:
            break
        gs = obj.perm_gradient(cols)
        js = 0.5 * float(gs[rows, cols].sum())
        xs = float(X[rows, cols].sum())
        xx = float((X * X).sum())
        # J(D) and |D|^2 for D = S - X
        jd = js - float(st.grad[rows, cols].sum()) + st.value
        curv = jd + shift * (n - 2.0 * xs + xx)
        t = min(1.0, gap / (-2.0 * curv)) if curv < 0 else 1.0
        lin = float(st.grad[rows, cols].sum() - (st.grad * X).sum())
        st.value += t * lin + t * t * jd
        st.grad = (1.0 - t) * st.grad + t * gs
        X = (1.0 - t) * X
        X[rows, cols] += t
        st.X = X
    return st


def path_follow_match(g1: MatchGraph, g2: MatchGraph, params: MatchParams | None = None,
                      factors: AffinityFactors | None = None) -> Correspondence:
    """Approximately maximize ``J`` over partial permutations.

    The relaxation ``J + (2 alpha - 1) mu |X|^2`` with ``mu`` the largest
    eigenvalue of ``K`` is concave at ``alpha = 0`` and convex at
    ``alpha = 1``, where it agrees with ``J`` up to a constant on
    permutations. ``alpha`` is stepped from 0 to 1 and each stage is solved by
    Frank-Wolfe iterations warm-started from the previous one, so the stage
    values in ``history`` never decrease. The result is the better, under
    ``J``, of the assignment of the final soft matrix and the best
    permutation visited along the path.
    """
    params = params or MatchParams()
    if g1.n_nodes < 1 or g2.n_nodes < 1:
        raise ContractError("both graphs need at least one node")
    if factors is None:
        factors = affinity_factors(g1, g2, params.edge_alignment)
    obj = FactorizedObjective(factors)
    n = obj.n
    rows = np.arange(n)
    mu = obj.spectral_bound() * (1.0 + 1e-6)
    st = _State(obj, np.full((n, n), 1.0 / n))
    steps = int(round(1.0 / params.alpha_step))
    history = []
    best_perm, best_val = None, -np.inf
    for s in range(steps + 1):
        alpha = min(1.0, s * params.alpha_step)
        shift = (2.0 * alpha - 1.0) * mu
        iters = params.first_inner_iters if s == 0 else params.max_inner_iters
        _frank_wolfe(obj, st, shift, iters, params.inner_tol)
        if s % 10 == 0 or s == steps:
            # resynchronize the carried quantities
            st.value = obj.value(st.X)
            st.grad = obj.gradient(st.X)
        history.append(st.value + shift * float((st.X * st.X).sum()))
        cols = assignment(st.X)
        val = 0.5 * float(obj.perm_gradient(cols)[rows, cols].sum())
        if val > best_val + 1e-12:
            best_perm, best_val = cols, val
    soft = sinkhorn(np.maximum(st.X, 1e-300), params.sinkhorn_iters, params.sinkhorn_tol)
    cols = assignment(soft)
    val = obj.value(_perm_matrix(cols))
    if val + 1e-12 < best_val:
        cols, val = best_perm, best_val
    return Correspondence(soft, cols, factors.n1, factors.n2, val, history)


def match_objective(g1: MatchGraph, g2: MatchGraph, C: np.ndarray, alignment: str = "max") -> float:
    """``1_C^T K 1_C`` of an ``N1 x N2`` assignment through the factors."""
    obj = FactorizedObjective(affinity_factors(g1, g2, alignment))
    X = np.zeros((obj.n, obj.n))
    X[: g1.n_nodes, : g2.n_nodes] = C
    return obj.value(X)


# ---------------------------------------------------------------------------
# deformable matching


def fit_transform(src: np.ndarray, dst: np.ndarray, w: np.ndarray, kind: str):
    """Weighted least-squares map ``src -> dst``; ``None`` if rank-deficient.

    Returns a ``2 x 3`` matrix ``[A | t]``.
    """
    sel = w > 0
    src, dst, w = src[sel], dst[sel], w[sel]
    if len(w) < 3:
        return None
    x, y = src[:, 0], src[:, 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    sw = np.sqrt(w)
    if kind == "similarity":
        # [a -b tx; b a ty]
        rows = np.concatenate([np.stack([x, -y, one, zero], 1), np.stack([y, x, zero, one], 1)])
        p, ok = _solve(rows, np.concatenate([dst[:, 0], dst[:, 1]]), np.concatenate([sw, sw]))
        if not ok:
            return None
        a, b, tx, ty = p
        return np.array([[a, -b, tx], [b, a, ty]])
    if kind == "affine":
        design = np.stack([x, y, one], 1)
        px, okx = _solve(design, dst[:, 0], sw)
        py, oky = _solve(design, dst[:, 1], sw)
        if not (okx and oky):
            return None
        return np.stack([px, py])
    raise ContractError(f"unknown transform {kind!r}")


def _solve(design, target, sw):
    A = design * sw[:, None]
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
        return None, False
    p, *_ = np.linalg.lstsq(A, target * sw, rcond=None)
    return p, True


def apply_transform(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ T[:, :2].T + T[:, 2]


def deformable_match(g1: MatchGraph, g2: MatchGraph, params: MatchParams | None = None) -> Correspondence:
    """Alternate correspondence and global transform estimation.

    Round 0 is plain path following. Each later round fits a transform
    (similarity first, then affine) taking the second graph's nodes onto
    the first under the current soft correspondence, warps them, recomputes
    the edge affinities and matches again. The best objective wins; a
    rank-deficient fit ends the loop.
    """
    params = params or MatchParams()
    base = affinity_factors(g1, g2, params.edge_alignment)
    best = path_follow_match(g1, g2, params, base)
    if not params.deformable or g1.n_nodes < 3 or g2.n_nodes < 3:
        return best
    current = best
    for r in range(1, params.rounds):
        W = current.soft[: g1.n_nodes, : g2.n_nodes]
        ii, kk = np.nonzero(W > 1e-9)
        kind = "similarity" if r == 1 else "affine"
        T = fit_transform(g2.pos[kk], g1.pos[ii], W[ii, kk], kind)
        if T is None:
            break
        warped = g2.with_positions(apply_transform(T, g2.pos))
        factors = affinity_factors(g1, warped, params.edge_alignment, node=base.node)
        current = path_follow_match(g1, warped, params, factors)
        if current.objective > best.objective + 1e-12:
            best = current
    return best


def unmatched_nodes(corr: Correspondence, tau: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nodes of each graph left without a confident real partner.

    A node is unmatched if it is assigned to a dummy or if the soft weight
    of its assignment is strictly below ``tau`` (default ``1/N``).
    """
    n = corr.soft.shape[0]
    tau = 1.0 / n if tau is None else tau
    rows = np.arange(n)
    weight = corr.soft[rows, corr.perm]
    weak = weight < tau * (1.0 - 1e-9)
    bad = weak | (rows >= corr.n1) | (corr.perm >= corr.n2)
    u1 = np.flatnonzero(bad[: corr.n1])
    inv = np.empty(n, dtype=np.int64)
    inv[corr.perm] = rows
    u2 = np.array([k for k in range(corr.n2) if bad[inv[k]]], dtype=np.int64)
    return u1, u2
