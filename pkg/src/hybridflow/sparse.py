"""Pixel-level matching inside paired regions and outlier rejection.

Matches are mutual nearest neighbours under L2 descriptor distance that also
pass a ratio test. They are filtered by a RANSAC fundamental matrix per
region and, on the graph route, by an affine consistency check between
neighbouring superpixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

ORIGIN_GRAPH = 0
ORIGIN_SMALL = 1
ORIGIN_NAMES = {ORIGIN_GRAPH: "graph", ORIGIN_SMALL: "small-cluster"}

_CHUNK_ENTRIES = 1 << 22


@dataclass
class SeedSet:
    """Sparse correspondences ``(x1, y1) -> (x2, y2)`` stored column-wise."""

    x1: np.ndarray
    y1: np.ndarray
    x2: np.ndarray
    y2: np.ndarray
    distance: np.ndarray
    region: np.ndarray
    origin: np.ndarray

    @classmethod
    def empty(cls) -> "SeedSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, np.zeros(0), z, z)

    @classmethod
    def concat(cls, sets) -> "SeedSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, f) for s in sets]) for f in cls._fields()))

    @staticmethod
    def _fields():
        return ("x1", "y1", "x2", "y2", "distance", "region", "origin")

    def __len__(self) -> int:
        return int(self.x1.size)

    def take(self, idx) -> "SeedSet":
        return SeedSet(*(getattr(self, f)[idx] for f in self._fields()))

    @property
    def u(self) -> np.ndarray:
        return (self.x2 - self.x1).astype(np.float64)

    @property
    def v(self) -> np.ndarray:
        return (self.y2 - self.y1).astype(np.float64)

    def count_by_origin(self) -> dict[str, int]:
        return {name: int((self.origin == code).sum()) for code, name in ORIGIN_NAMES.items()}


# ---------------------------------------------------------------------------
# pixel matching


def match_pixels(region1, region2, field1: np.ndarray, field2: np.ndarray, stride: int = 2,
                 ratio: float = 0.9, exclusion: float = 3.0, region_id: int = 0,
                 origin: int = ORIGIN_SMALL) -> SeedSet:
    """Mutual nearest-neighbour descriptor matches between two pixel sets.

    Parameters
    ----------
    region1, region2 : tuple of ndarray
        ``(ys, xs)`` pixel coordinates in frame 1 and frame 2.
    field1, field2 : ndarray, shape (H, W, D)
        Descriptor fields of the two frames.
    stride : int
        Frame-1 candidates are the region pixels on the image grid of this
        step. Every frame-2 pixel is a candidate, so any integer shift can be
        recovered.
    ratio : float
        A match is kept when ``best < ratio * second``. The second-best
        candidate is taken outside a disc of radius ``exclusion`` around the
        best, since neighbouring pixels carry almost identical descriptors.
    """
    ys1, xs1 = (np.asarray(a) for a in region1)
    ys2, xs2 = (np.asarray(a) for a in region2)
    grid = (ys1 % stride == 0) & (xs1 % stride == 0)
    ys1, xs1 = ys1[grid], xs1[grid]
    n1, n2 = ys1.size, ys2.size
    if n1 == 0 or n2 == 0:
        return SeedSet.empty()
    d1 = field1[ys1, xs1].astype(np.float64)
    d2 = field2[ys2, xs2].astype(np.float64)
    sq1 = (d1 * d1).sum(1)
    sq2 = (d2 * d2).sum(1)
    best_col = np.empty(n1, dtype=np.int64)
    best = np.empty(n1)
    second = np.empty(n1)
    col_row = np.full(n2, -1, dtype=np.int64)
    col_best = np.full(n2, np.inf)
    step = max(1, _CHUNK_ENTRIES // n2)
    ex2 = exclusion * exclusion
    cols = np.arange(n2)
    for a in range(0, n1, step):
        b = min(n1, a + step)
        D = sq1[a:b, None] + sq2[None, :] - 2.0 * (d1[a:b] @ d2.T)
        np.maximum(D, 0.0, out=D)
        j = np.argmin(D, axis=1)
        rows = np.arange(b - a)
        best_col[a:b] = j
        best[a:b] = D[rows, j]
        near = (ys2[None, :] - ys2[j][:, None]) ** 2 + (xs2[None, :] - xs2[j][:, None]) ** 2 <= ex2
        D2 = np.where(near, np.inf, D)
        second[a:b] = D2.min(axis=1)
        i = np.argmin(D, axis=0)
        v = D[i, cols]
        upd = v < col_best
        col_best[upd] = v[upd]
        col_row[upd] = i[upd] + a
    mutual = col_row[best_col] == np.arange(n1)
    passed = np.sqrt(best) < ratio * np.sqrt(second)
    keep = np.flatnonzero(mutual & passed)
    j = best_col[keep]
    return SeedSet(
        xs1[keep].astype(np.int64), ys1[keep].astype(np.int64),
        xs2[j].astype(np.int64), ys2[j].astype(np.int64),
        np.sqrt(best[keep]), np.full(keep.size, region_id, dtype=np.int64),
        np.full(keep.size, origin, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# fundamental matrix RANSAC


@dataclass
class RansacResult:
    """Outcome of a consensus fit.

    ``model`` is ``"fundamental"``, ``"affine"`` (used when every minimal
    sample or the consensus set is degenerate for the eight-point method) or
    ``"passthrough"`` (too few matches to test).
    """

    inliers: np.ndarray
    model: str
    F: np.ndarray | None = None
    A: np.ndarray | None = None
    iterations: int = 0
    warnings: list = field(default_factory=list)


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=-2, keepdims=True)
    d = np.sqrt(((pts - c) ** 2).sum(-1)).mean(-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def _homog(pts):
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


def _design(p1, p2):
    x1, y1 = p1[..., 0], p1[..., 1]
    x2, y2 = p2[..., 0], p2[..., 1]
    one = np.ones_like(x1)
    return np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, one], axis=-1)


def eight_point(p1: np.ndarray, p2: np.ndarray, rank_tol: float = 1e-8):
    """Normalized eight-point estimate(s) of ``F`` with ``x2^T F x1 = 0``.

    Accepts a batch ``(..., n, 2)`` with ``n >= 8``. Returns ``(F, ok)``
    where ``ok`` flags samples whose design matrix has rank 8.
    """
    T1 = _normalizer(p1)
    T2 = _normalizer(p2)
    q1 = np.einsum("...ij,...nj->...ni", T1, _homog(p1))[..., :2]
    q2 = np.einsum("...ij,...nj->...ni", T2, _homog(p2))[..., :2]
    A = _design(q1, q2)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    ok = s[..., 7] > rank_tol * s[..., 0]
    F = vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    u, sf, vtf = np.linalg.svd(F)
    sf[..., 2] = 0.0
    F = np.einsum("...ij,...j,...jk->...ik", u, sf, vtf)
    F = np.einsum("...ji,...jk,...kl->...il", T2, F, T1)
    norm = np.linalg.norm(F.reshape(F.shape[:-2] + (9,)), axis=-1)
    F = F / np.maximum(norm, 1e-300)[..., None, None]
    return F, ok


def sampson_distance(F: np.ndarray, p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """First-order geometric epipolar error in pixels; ``F`` may be batched."""
    h1 = _homog(p1)
    h2 = _homog(p2)
    Fx1 = np.einsum("...ij,nj->...ni", F, h1)
    Ftx2 = np.einsum("...ji,nj->...ni", F, h2)
    num = (h2 * Fx1).sum(-1) ** 2
    den = Fx1[..., 0] ** 2 + Fx1[..., 1] ** 2 + Ftx2[..., 0] ** 2 + Ftx2[..., 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def _needed(inlier_frac: float, sample: int, confidence: float) -> float:
    if inlier_frac <= 0:
        return np.inf
    if inlier_frac >= 1:
        return 0
    return np.log(1 - confidence) / np.log(1 - inlier_frac ** sample)


def _samples(rng, n, size, batch):
    # sort random keys to draw ``size`` distinct indices per row
    return np.argsort(rng.random((batch, n)), axis=1)[:, :size]


def _fit_affine(p1, p2):
    A = np.concatenate([p1, np.ones((len(p1), 1))], axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-9 * sv[0]:
        return None
    M, *_ = np.linalg.lstsq(A, p2, rcond=None)
    return M.T


def _consensus_affine(p1, p2, tol):
    """Affine map agreed on by most points, refitted on its consensus.

    Every non-degenerate triplet is tried (neighbourhoods are small), so the
    result is deterministic. Triplets are scored by the truncated quadratic
    loss ``sum(min(r^2, tol^2))``; the first best one wins. ``None`` when
    no map is found or, with more than three points, no fourth point
    confirms the winner (the outlier, if any, cannot be identified).
    """
    n = len(p1)
    if n <= 3:
        return _fit_affine(p1, p2)
    trip = np.array(list(combinations(range(n), 3)))
    A = np.concatenate([p1, np.ones((n, 1))], axis=1)
    At = A[trip]
    scale = np.abs(p1 - p1.mean(0)).max() + 1.0
    ok = np.abs(np.linalg.det(At)) > 1e-9 * scale * scale
    if not ok.any():
        return None
    sol = np.linalg.solve(At[ok], p2[trip[ok]])
    res = np.linalg.norm(np.einsum("nk,tkd->tnd", A, sol) - p2[None], axis=2)
    score = np.minimum(res * res, tol * tol).sum(1)
    inl = res[int(np.argmin(score))] <= tol
    return _fit_affine(p1[inl], p2[inl]) if inl.sum() >= 4 else None


def _affine_ransac(p1, p2, threshold, iters, rng, confidence, batch=100):
    """Three-point affine RANSAC; returns ``(inliers, 2x3 matrix or None, samples drawn)``."""
    n = len(p1)
    h1 = _homog(p1)
    best_inl, best_count, done, needed = None, -1, 0, iters
    while done < min(iters, needed):
        b = int(min(batch, iters - done))
        idx = _samples(rng, n, 3, b)
        done += b
        A = h1[idx]
        det = np.linalg.det(A)
        scale = np.abs(A[..., :2]).max(axis=(1, 2)) ** 2
        ok = np.abs(det) > 1e-9 * np.maximum(scale, 1e-300)
        if not ok.any():
            continue
        M = np.linalg.solve(A[ok], p2[idx[ok]])
        err = np.linalg.norm(np.einsum("nj,bjk->bnk", h1, M) - p2, axis=-1)
        inl = err < threshold
        counts = inl.sum(1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_inl, best_count = inl[k], int(counts[k])
            needed = _needed(best_count / n, 3, confidence)
    if best_inl is None:
        return np.ones(n, dtype=bool), None, done
    M = _fit_affine(p1[best_inl], p2[best_inl])
    if M is not None:
        err = np.linalg.norm(p1 @ M[:, :2].T + M[:, 2] - p2, axis=1)
        refined = err < threshold
        if refined.sum() >= best_count:
            best_inl = refined
    return best_inl, M, done


def ransac_fundamental(p1: np.ndarray, p2: np.ndarray, threshold: float = 1.0, iters: int = 2000,
                       seed: int = 0, region_id: int = 0, confidence: float = 0.999,
                       batch: int = 100, degeneracy_ratio: float = 0.95) -> RansacResult:
    """Inliers of the best fundamental-matrix consensus.

    Parameters
    ----------
    p1, p2 : ndarray, shape (N, 2)
        Matched ``(x, y)`` positions.
    threshold : float
        Sampson distance bound in pixels.
    iters : int
        Maximum number of minimal samples; sampling stops early once the
        consensus reaches ``confidence``.
    seed, region_id : int
        The random stream is ``default_rng([seed, region_id])`` so results do
        not depend on the order in which regions are processed.
    degeneracy_ratio : float
        A three-point affine RANSAC runs alongside. When its consensus
        reaches this fraction of the fundamental one, the matches are
        (close to) related by a homography, ``F`` is not determined by them
        and the affine inliers are returned instead.
    """
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 2)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 2)
    if p1.shape != p2.shape:
        raise ContractError("match arrays differ in shape")
    n = len(p1)
    if n < 8:
        msg = f"region {region_id}: {n} matches, RANSAC skipped"
        log.debug(msg)
        return RansacResult(np.ones(n, dtype=bool), "passthrough", warnings=[msg])
    rng = np.random.default_rng([seed, region_id])
    best_inl, best_count, best_F = None, -1, None
    done, needed = 0, iters
    while done < min(iters, needed):
        b = int(min(batch, iters - done))
        idx = _samples(rng, n, 8, b)
        done += b
        F, ok = eight_point(p1[idx], p2[idx])
        if not ok.any():
            continue
        F = F[ok]
        inl = sampson_distance(F, p1, p2) < threshold
        counts = inl.sum(1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_inl, best_count, best_F = inl[k], int(counts[k]), F[k]
            needed = _needed(best_count / n, 8, confidence)
    fund = None
    if best_inl is not None and best_count >= 8:
        F, ok = eight_point(p1[best_inl], p2[best_inl])
        fund = (best_inl, best_F)
        if ok:
            refined = sampson_distance(F, p1, p2) < threshold
            if refined.sum() >= best_count:
                fund = (refined, F)
    aff_inl, M, extra = _affine_ransac(p1, p2, threshold, iters, rng, confidence)
    done += extra
    # a consensus that an affine map explains almost entirely is degenerate
    # for the eight-point method (it admits a family of F), so the affine
    # model decides; likewise when every sample was degenerate
    if fund is not None and aff_inl.sum() < degeneracy_ratio * fund[0].sum():
        return RansacResult(fund[0], "fundamental", F=fund[1], iterations=done)
    msg = f"region {region_id}: degenerate for the eight-point method, affine model used"
    log.debug(msg)
    return RansacResult(aff_inl, "affine", A=M, iterations=done, warnings=[msg])


# ---------------------------------------------------------------------------
# superpixel-level filtering


def affine_consistency(pos1: np.ndarray, pos2: np.ndarray, neighbors: list, matched: np.ndarray,
                       min_neighbors: int = 3, base_tol: float = 3.0) -> np.ndarray:
    """Reject superpixels whose motion disagrees with their neighbourhood.

    Parameters
    ----------
    pos1, pos2 : ndarray, shape (N, 2)
        Centroid of each first-graph node and of its matched partner.
    neighbors : list of ndarray
        Delaunay neighbours of each node in the first graph.
    matched : ndarray of bool, shape (N,)
        Nodes with a valid partner; the others are neither tested nor used.

    Returns
    -------
    ndarray of bool
        ``True`` for nodes kept. A node is rejected when its displacement
        from the affine map fitted to its matched neighbours exceeds
        ``2 * median(neighbour residuals) + base_tol``. Nodes with fewer
        than ``min_neighbors`` matched neighbours, or whose neighbours are
        collinear, are kept.

    Notes
    -----
    The neighbourhood fit is least squares over the neighbours that agree,
    within ``base_tol``, with the best triplet-based affine map, so a single
    bad neighbour does not condemn the nodes around it. When more than three
    neighbours exist but no four agree, the node is kept as untestable.
    """
    keep = np.asarray(matched, dtype=bool).copy()
    for s in np.flatnonzero(matched):
        nb = np.asarray(neighbors[s], dtype=np.int64)
        nb = nb[matched[nb]]
        if nb.size < min_neighbors:
            continue
        M = _consensus_affine(pos1[nb], pos2[nb], base_tol)
        if M is None:
            continue
        res_nb = np.linalg.norm(pos1[nb] @ M[:, :2].T + M[:, 2] - pos2[nb], axis=1)
        res_s = np.linalg.norm(pos1[s] @ M[:, :2].T + M[:, 2] - pos2[s])
        if res_s > 2.0 * np.median(res_nb) + base_tol:
            keep[s] = False
    return keep


def seeds_from_superpixel_matches(pairs: np.ndarray, members1: list, members2: list,
                                  field1: np.ndarray, field2: np.ndarray, stride: int = 2,
                                  ratio: float = 0.9, exclusion: float = 3.0,
                                  ransac_threshold: float = 1.0, ransac_iters: int = 2000,
                                  seed: int = 0, region_base: int = 0) -> SeedSet:
    """Pixel seeds inside each matched superpixel pair.

    ``pairs`` lists surviving ``(i, k)`` node pairs; ``members1[i]`` and
    ``members2[k]`` are their ``(ys, xs)`` pixel sets. Each pair is matched
    with :func:`match_pixels` and filtered by its own RANSAC.
    """
    out = []
    for n, (i, k) in enumerate(pairs):
        rid = region_base + n
        m = match_pixels(members1[i], members2[k], field1, field2, stride, ratio, exclusion,
                         region_id=rid, origin=ORIGIN_GRAPH)
        if not len(m):
            continue
        res = ransac_fundamental(np.stack([m.x1, m.y1], 1), np.stack([m.x2, m.y2], 1),
                                 ransac_threshold, ransac_iters, seed, rid)
        out.append(m.take(np.flatnonzero(res.inliers)))
    return SeedSet.concat(out)
