"""Sparse-to-dense interpolation and single-scale variational refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from . import kernels
from .errors import ContractError
from .imagery import FlowField
from .sparse import SeedSet

log = logging.getLogger(__name__)


def edge_cost(image: np.ndarray, sigma: float = 1.0, percentile: float = 99.0) -> np.ndarray:
    """Boundary strength in ``[0, 1]`` from the smoothed color gradient.

    The gradient magnitude (summed over channels) of the Gaussian-smoothed
    image is divided by its ``percentile``-th value and clamped.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    mag2 = np.zeros(img.shape[:2])
    for c in range(img.shape[2]):
        s = ndimage.gaussian_filter(img[..., c], sigma, mode="nearest")
        gy, gx = np.gradient(s)
        mag2 += gx * gx + gy * gy
    mag = np.sqrt(mag2)
    ref = np.percentile(mag, percentile)
    if ref <= 0:
        return np.zeros_like(mag)
    return np.clip(mag / ref, 0.0, 1.0)


def assemble_seeds(sets) -> SeedSet:
    """Union of seed sets in the given order.

    When several seeds start at the same frame-1 pixel, the one with the
    smallest descriptor distance is kept (the earliest on ties).
    """
    seeds = SeedSet.concat(list(sets))
    if not len(seeds):
        return seeds
    order = np.lexsort((np.arange(len(seeds)), seeds.distance, seeds.x1, seeds.y1))
    ys, xs = seeds.y1[order], seeds.x1[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = (ys[1:] != ys[:-1]) | (xs[1:] != xs[:-1])
    return seeds.take(np.sort(order[first]))


# ---------------------------------------------------------------------------
# interpolation


@dataclass
class InterpolationParams:
    k: int = 25
    eps: float = 0.01
    sigma_fraction: float = 1.0 / 3.0
    chunk: int = 1 << 16


def _seed_graph(dist, label, cost, eps, n):
    """Adjacency of geodesic Voronoi cells, weighted by the shortest crossing path."""
    h, w = label.shape
    keys, vals = [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        ys0, ys1 = slice(0, h - dy), slice(dy, h)
        xs0, xs1 = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        a = label[ys0, xs0]
        b = label[ys1, xs1]
        sel = (a != b) & (a >= 0) & (b >= 0)
        if not sel.any():
            continue
        step = np.hypot(dx, dy) * (eps + 0.5 * (cost[ys0, xs0] + cost[ys1, xs1]))
        wgt = (dist[ys0, xs0] + step + dist[ys1, xs1])[sel]
        lo = np.minimum(a[sel], b[sel]).astype(np.int64)
        hi = np.maximum(a[sel], b[sel]).astype(np.int64)
        keys.append(lo * n + hi)
        vals.append(wgt)
    if not keys:
        return sparse.csr_matrix((n, n))
    keys = np.concatenate(keys)
    vals = np.concatenate(vals)
    uniq, inv = np.unique(keys, return_inverse=True)
    best = np.full(uniq.size, np.inf)
    np.minimum.at(best, inv, vals)
    lo, hi = uniq // n, uniq % n
    g = sparse.coo_matrix((np.concatenate([best, best]), (np.concatenate([lo, hi]), np.concatenate([hi, lo]))),
                          shape=(n, n))
    return g.tocsr()


def _nearest_fill(label, u, v):
    return FlowField.from_uv(u[label], v[label])


def interpolate(seeds: SeedSet, cost: np.ndarray, params: InterpolationParams | None = None) -> FlowField:
    """Dense flow from seeds by locally weighted affine fits.

    Each pixel takes the ``k`` seeds closest to its geodesically nearest
    seed (distances measured along the cost map, plus the pixel's own
    distance to that seed). An affine flow is fitted to them with weights
    ``exp(-d / sigma)``, ``sigma`` being a fraction of the largest of the
    ``k`` distances, and evaluated at the pixel. Ill-conditioned fits fall
    back to the weighted mean; fewer than three non-collinear seeds give a
    nearest-seed fill.
    """
    params = params or InterpolationParams()
    n = len(seeds)
    if n == 0:
        raise ContractError("interpolation needs at least one seed")
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    h, w = cost.shape
    sx, sy = seeds.x1.astype(np.int64), seeds.y1.astype(np.int64)
    if sx.min() < 0 or sy.min() < 0 or sx.max() >= w or sy.max() >= h:
        raise ContractError("seed outside the image")
    su, sv = seeds.u, seeds.v
    dist, label = kernels.geodesic_voronoi(cost, np.ascontiguousarray(sy, dtype=np.intp),
                                           np.ascontiguousarray(sx, dtype=np.intp), params.eps)
    pts = np.stack([sx, sy, np.ones(n)], axis=1).astype(np.float64)
    if n < 3 or np.linalg.matrix_rank(pts - [pts[0, 0], pts[0, 1], 0]) < 3:
        return _nearest_fill(label, su, sv)

    graph = _seed_graph(dist, label, cost, params.eps, n)
    k = min(params.k, n)
    nbr, nbd = kernels.seed_knn(n, graph.indptr.astype(np.intp), graph.indices.astype(np.intp),
                                graph.data.astype(np.float64), k)

    flat_label = label.ravel()
    flat_dist = dist.ravel()
    out_u = np.empty(h * w)
    out_v = np.empty(h * w)
    for a in range(0, h * w, params.chunk):
        b = min(h * w, a + params.chunk)
        lab = flat_label[a:b]
        nb = nbr[lab]
        ok = nb >= 0
        nbs = np.where(ok, nb, 0)
        g = flat_dist[a:b, None] + nbd[lab]
        g = np.where(ok, g, np.inf)
        gmax = np.max(np.where(ok, g, -np.inf), axis=1)
        sigma = np.maximum(params.sigma_fraction * gmax, 1e-12)
        wgt = np.where(ok, np.exp(-(g - g[:, :1]) / sigma[:, None]), 0.0)
        pix = np.arange(a, b)
        px, py = pix % w, pix // w
        dx = sx[nbs] - px[:, None]
        dy = sy[nbs] - py[:, None]
        uu, vv = su[nbs], sv[nbs]
        # normal equations in coordinates centred on the pixel: the intercept
        # is the flow at the pixel
        s0 = wgt.sum(1)
        sx_ = (wgt * dx).sum(1)
        sy_ = (wgt * dy).sum(1)
        sxx = (wgt * dx * dx).sum(1)
        sxy = (wgt * dx * dy).sum(1)
        syy = (wgt * dy * dy).sum(1)
        M = np.stack([
            np.stack([s0, sx_, sy_], -1),
            np.stack([sx_, sxx, sxy], -1),
            np.stack([sy_, sxy, syy], -1),
        ], axis=-2)
        rhs = np.stack([
            np.stack([(wgt * uu).sum(1), (wgt * uu * dx).sum(1), (wgt * uu * dy).sum(1)], -1),
            np.stack([(wgt * vv).sum(1), (wgt * vv * dx).sum(1), (wgt * vv * dy).sum(1)], -1),
        ], axis=-1)
        mean_u = rhs[:, 0, 0] / s0
        mean_v = rhs[:, 0, 1] / s0
        # scale-free conditioning test on the normal matrix
        diag = np.sqrt(np.einsum("nii->ni", M))
        diag = np.where(diag > 0, diag, 1.0)
        Mn = M / diag[:, :, None] / diag[:, None, :]
        good = np.abs(np.linalg.det(Mn)) > 1e-6
        res_u, res_v = mean_u.copy(), mean_v.copy()
        if good.any():
            sol = np.linalg.solve(M[good], rhs[good])
            res_u[good] = sol[:, 0, 0]
            res_v[good] = sol[:, 0, 1]
        out_u[a:b] = res_u
        out_v[a:b] = res_v
    return FlowField.from_uv(out_u.reshape(h, w), out_v.reshape(h, w))


# ---------------------------------------------------------------------------
# variational refinement


@dataclass
class RefinementParams:
    """Settings of the single-scale variational refinement."""

    outer_iters: int = 5
    sor_iters: int = 30
    alpha: float = 10.0
    gamma: float = 5.0
    omega: float = 1.85
    eps2: float = 1e-6
    intensity_scale: float = 255.0
    max_backtracks: int = 8

    def validate(self):
        for name in ("outer_iters", "sor_iters", "alpha", "gamma", "eps2", "intensity_scale"):
            if not getattr(self, name) > 0:
                raise ContractError(f"refinement parameter {name} must be positive")
        if not 0 < self.omega < 2:
            raise ContractError("SOR relaxation must lie in (0, 2)")


def _psi(s2, eps2):
    return np.sqrt(s2 + eps2)


def _dpsi(s2, eps2):
    return 0.5 / np.sqrt(s2 + eps2)


def _derivs(img):
    """Central differences along x and y, one-sided at the border."""
    gy, gx = np.gradient(img, axis=(0, 1))
    return gx, gy


class _Warper:
    """Bilinear lookups of frame-2 quantities at ``x + w``."""

    def __init__(self, I2):
        self.I2 = I2
        self.h, self.w = I2.shape[:2]
        self.gx, self.gy = _derivs(I2)
        self.gxx, self.gxy = _derivs(self.gx)
        _, self.gyy = _derivs(self.gy)

    def at(self, u, v):
        h, w = self.h, self.w
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        X = xx + u
        Y = yy + v
        inside = (X >= 0) & (X <= w - 1) & (Y >= 0) & (Y <= h - 1)
        coords = [np.clip(Y, 0, h - 1).ravel(), np.clip(X, 0, w - 1).ravel()]

        def sample(arr):
            chans = [ndimage.map_coordinates(arr[..., c], coords, order=1, mode="nearest")
                     for c in range(arr.shape[2])]
            return np.stack(chans, -1).reshape(arr.shape)

        return inside, {name: sample(getattr(self, name))
                        for name in ("I2", "gx", "gy", "gxx", "gxy", "gyy")}


def _smooth_terms(u, v):
    ux = np.zeros_like(u)
    uy = np.zeros_like(u)
    vx = np.zeros_like(v)
    vy = np.zeros_like(v)
    ux[:, :-1] = u[:, 1:] - u[:, :-1]
    uy[:-1, :] = u[1:, :] - u[:-1, :]
    vx[:, :-1] = v[:, 1:] - v[:, :-1]
    vy[:-1, :] = v[1:, :] - v[:-1, :]
    return ux * ux + uy * uy + vx * vx + vy * vy


def flow_energy(u, v, I1, warper: _Warper, I1x, I1y, params: RefinementParams) -> float:
    """Discrete energy minimized by :func:`refine` (images already scaled)."""
    inside, s = warper.at(u, v)
    dz = ((s["I2"] - I1) ** 2).sum(-1)
    dg = ((s["gx"] - I1x) ** 2 + (s["gy"] - I1y) ** 2).sum(-1)
    data = np.where(inside, _psi(dz, params.eps2) + params.gamma * _psi(dg, params.eps2), 0.0)
    smooth = params.alpha * _psi(_smooth_terms(u, v), params.eps2)
    return float(data.sum() + smooth.sum())


def refine(flow: FlowField, I1: np.ndarray, I2: np.ndarray, params: RefinementParams | None = None,
           history: list | None = None) -> FlowField:
    """Variational refinement at full resolution.

    Minimizes color and gradient constancy plus flow smoothness, all under
    the Charbonnier penalty ``sqrt(s^2 + eps2)``. Each outer iteration warps
    frame 2 by the current flow, linearizes the data terms, freezes the
    robust weights and runs red-black SOR on the increment. If the full
    increment would raise the energy it is halved until it does not (or
    dropped), so the recorded energies never increase. Intensities are
    multiplied by ``intensity_scale`` first. ``history`` receives the energy
    before the first and after every outer iteration.
    """
    params = params or RefinementParams()
    params.validate()
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    if I1.ndim == 2:
        I1, I2 = I1[..., None], I2[..., None]
    if I1.shape != I2.shape or I1.shape[:2] != flow.shape:
        raise ContractError("flow and images must share dimensions")
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    if not (np.isfinite(u).all() and np.isfinite(v).all() and np.isfinite(I1).all() and np.isfinite(I2).all()):
        raise ContractError("refine needs finite inputs")
    I1 = I1 * params.intensity_scale
    I2 = I2 * params.intensity_scale
    I1x, I1y = _derivs(I1)
    warper = _Warper(I2)
    eps2, gamma, alpha = params.eps2, params.gamma, params.alpha
    energy = flow_energy(u, v, I1, warper, I1x, I1y, params)
    if history is not None:
        history.append(energy)
    for _ in range(params.outer_iters):
        inside, s = warper.at(u, v)
        Ix, Iy = s["gx"], s["gy"]
        Iz = s["I2"] - I1
        Ixx, Ixy, Iyy = s["gxx"], s["gxy"], s["gyy"]
        Ixz = s["gx"] - I1x
        Iyz = s["gy"] - I1y
        m = inside.astype(np.float64)
        wd = m * _dpsi((Iz ** 2).sum(-1), eps2)
        wg = m * gamma * _dpsi((Ixz ** 2 + Iyz ** 2).sum(-1), eps2)
        a11 = wd * (Ix * Ix).sum(-1) + wg * (Ixx * Ixx + Ixy * Ixy).sum(-1)
        a12 = wd * (Ix * Iy).sum(-1) + wg * (Ixx * Ixy + Ixy * Iyy).sum(-1)
        a22 = wd * (Iy * Iy).sum(-1) + wg * (Ixy * Ixy + Iyy * Iyy).sum(-1)
        b1 = wd * (Ix * Iz).sum(-1) + wg * (Ixx * Ixz + Ixy * Iyz).sum(-1)
        b2 = wd * (Iy * Iz).sum(-1) + wg * (Ixy * Ixz + Iyy * Iyz).sum(-1)
        ws = _dpsi(_smooth_terms(u, v), eps2)
        wx = np.ascontiguousarray(0.5 * (ws[:, 1:] + ws[:, :-1]))
        wy = np.ascontiguousarray(0.5 * (ws[1:, :] + ws[:-1, :]))
        du = np.zeros_like(u)
        dv = np.zeros_like(v)
        kernels.sor_red_black(du, dv, *(np.ascontiguousarray(x) for x in (a11, a12, a22, b1, b2)),
                              wx, wy, u, v, alpha, params.omega, params.sor_iters)
        t = 1.0
        accepted = False
        for _ in range(params.max_backtracks + 1):
            cand = flow_energy(u + t * du, v + t * dv, I1, warper, I1x, I1y, params)
            if np.isfinite(cand) and cand <= energy:
                u, v, energy = u + t * du, v + t * dv, cand
                accepted = True
                break
            t *= 0.5
        if history is not None:
            history.append(energy)
        if not accepted:
            log.debug("refinement step rejected; flow kept")
            break
    return FlowField(u.astype(np.float32), v.astype(np.float32), flow.valid.copy())
