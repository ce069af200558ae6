"""Masked SLIC superpixels inside a coarse cluster."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

from . import kernels
from .errors import ContractError

DEFAULT_SUPERPIXEL_SIZE = 2223
# a label whose largest piece is below this share of |mask| / k is dissolved
ORPHAN_FRACTION = 1.0 / 16


@dataclass
class SuperpixelMap:
    """Superpixels of one cluster mask.

    ``labels`` spans the whole image with ``-1`` outside the superpixels.
    ``residual`` holds mask pixels left out because their connected component
    was below ``min_component`` (empty unless that option is used).
    """

    labels: np.ndarray
    count: int
    residual: np.ndarray
    cluster_index: int = -1
    _members: list = field(default=None, repr=False)

    def members(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(ys, xs)`` per superpixel id, pixels in raster order."""
        if self._members is None:
            flat = self.labels.ravel()
            inside = np.flatnonzero(flat >= 0)
            order = inside[np.argsort(flat[inside], kind="stable")]
            bounds = np.searchsorted(flat[order], np.arange(self.count + 1))
            w = self.labels.shape[1]
            self._members = [
                (order[a:b] // w, order[a:b] % w) for a, b in zip(bounds[:-1], bounds[1:])
            ]
        return self._members

    def areas(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.count)

    def centroids(self) -> np.ndarray:
        """``(count, 2)`` array of ``(x, y)`` centroids."""
        return np.array([[xs.mean(), ys.mean()] for ys, xs in self.members()]).reshape(-1, 2)


def target_count(cluster_area: int, s_size: float = DEFAULT_SUPERPIXEL_SIZE) -> int:
    """Number of superpixels for a region: ``round(area / s_size)``, at least 1."""
    if s_size < 16:
        raise ContractError(f"superpixel size must be >= 16, got {s_size}")
    return max(1, int(np.floor(cluster_area / s_size + 0.5)))


def _apportion(total: int, sizes: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``sizes``, each at least 1."""
    quota = total * sizes / sizes.sum()
    base = np.floor(quota).astype(int)
    rest = total - base.sum()
    if rest > 0:
        order = np.lexsort((np.arange(len(sizes)), -(quota - base)))
        base[order[:rest]] += 1
    return np.maximum(base, 1)


def _grid_seeds(comp_mask: np.ndarray, k: int) -> np.ndarray:
    """Seed positions ``(y, x)`` on a row grid inside ``comp_mask``.

    The row count follows the bounding-box aspect ratio, each row holding an
    even share of the seeds. The total is rescaled a few times so that
    roughly ``k`` points land inside the mask.
    """
    ys, xs = np.nonzero(comp_mask)
    y0, x0 = ys.min(), xs.min()
    bh, bw = ys.max() + 1 - y0, xs.max() + 1 - x0
    total = k * (bh * bw) / ys.size
    best = None
    for _ in range(8):
        n_total = max(1, int(round(total)))
        ny = min(n_total, max(1, int(round(np.sqrt(total * bh / bw)))))
        per_row = np.full(ny, n_total // ny)
        per_row[: n_total - per_row.sum()] += 1
        cy = np.concatenate(
            [np.full(n, int(y0 + (r + 0.5) * bh / ny)) for r, n in enumerate(per_row)]
        )
        cx = np.concatenate([(x0 + (np.arange(n) + 0.5) * bw / n).astype(int) for n in per_row])
        inside = comp_mask[cy, cx]
        pts = np.stack([cy[inside], cx[inside]], axis=1)
        if len(pts) and (best is None or abs(len(pts) - k) < abs(len(best) - k)):
            best = pts
        if len(pts) == k:
            break
        total *= k / max(len(pts), 0.5)
    if best is None:
        cy, cx = ys.mean(), xs.mean()
        i = np.argmin((ys - cy) ** 2 + (xs - cx) ** 2)
        best = np.array([[ys[i], xs[i]]])
    return best


def _perturb_seeds(seeds: np.ndarray, lab: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient mask pixel of its 3x3 neighbourhood."""
    h, w = mask.shape
    pad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    grad = ((pad[1:-1, 2:] - pad[1:-1, :-2]) ** 2).sum(-1) + ((pad[2:, 1:-1] - pad[:-2, 1:-1]) ** 2).sum(-1)
    out = seeds.copy()
    for n, (y, x) in enumerate(seeds):
        best = (grad[y, x], y, x)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and grad[ny, nx] < best[0]:
                    best = (grad[ny, nx], ny, nx)
        out[n] = best[1:]
    return out


def _kmeans(lab, mask, seeds, compactness, iterations):
    """SLIC assignment/update loop restricted to ``mask``; returns labels (-1 unassigned)."""
    h, w = mask.shape
    k = len(seeds)
    step = np.sqrt(mask.sum() / k)
    centers = np.concatenate([lab[seeds[:, 0], seeds[:, 1]], seeds[:, ::-1].astype(float)], axis=1)
    labels = np.full((h, w), -1, dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    ratio = (compactness / step) ** 2
    radius = int(np.ceil(2 * step))
    for _ in range(iterations):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for c in range(k):
            cx, cy = centers[c, 3], centers[c, 4]
            ya, yb = max(int(cy) - radius, 0), min(int(cy) + radius + 1, h)
            xa, xb = max(int(cx) - radius, 0), min(int(cx) + radius + 1, w)
            win = (slice(ya, yb), slice(xa, xb))
            dc = ((lab[win] - centers[c, :3]) ** 2).sum(-1)
            ds = (yy[win] - cy) ** 2 + (xx[win] - cx) ** 2
            d = dc + ds * ratio
            better = mask[win] & (d < dist[win])
            dist[win][better] = d[better]
            labels[win][better] = c
        sel = labels >= 0
        lbl = labels[sel]
        counts = np.bincount(lbl, minlength=k)
        feats = np.concatenate([lab[sel], xx[sel][:, None], yy[sel][:, None]], axis=1)
        sums = np.zeros((k, 5))
        np.add.at(sums, lbl, feats)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    return labels


def enforce_connectivity(labels: np.ndarray, mask: np.ndarray, min_size: int) -> np.ndarray:
    """Make every superpixel 4-connected.

    Each label keeps its largest 4-connected piece when that piece has at
    least ``min_size`` pixels. Every other piece, and every unassigned mask
    pixel, is an orphan and joins the largest adjacent kept segment. Returns
    labels renumbered ``0..n-1`` in raster order, ``-1`` outside ``mask``.
    """
    comp, ncomp = kernels.label_components(
        np.ascontiguousarray(labels, dtype=np.int32), np.ascontiguousarray(mask, dtype=np.uint8)
    )
    if ncomp == 0:
        return np.full(labels.shape, -1, dtype=np.int32)
    inside = comp >= 0
    sizes = np.bincount(comp[inside], minlength=ncomp)
    comp_label = np.full(ncomp, -1, dtype=np.int64)
    comp_label[comp[inside]] = labels[inside]

    # each label keeps its largest piece if that piece reaches min_size
    keep = np.zeros(ncomp, dtype=bool)
    for lab in np.unique(comp_label[comp_label >= 0]):
        members = np.flatnonzero(comp_label == lab)
        best = members[np.argmax(sizes[members])]
        keep[best] = sizes[best] >= min_size
    if not keep.any():
        keep[np.argmax(np.where(comp_label >= 0, sizes, -1))] = True

    adj = [set() for _ in range(ncomp)]
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        sel = (a >= 0) & (b >= 0) & (a != b)
        pairs = np.unique(np.stack([a[sel], b[sel]], axis=1), axis=0)
        for p, q in pairs:
            adj[p].add(int(q))
            adj[q].add(int(p))

    # orphans join kept segments in waves outward from them, so an orphan
    # never absorbs another orphan and no segment snowballs
    owner = np.where(keep, np.arange(ncomp), -1)
    area = np.where(keep, sizes, 0).astype(np.int64)
    pending = [int(c) for c in np.flatnonzero(~keep)]
    while pending:
        wave = []
        for c in pending:
            owners = {int(owner[nb]) for nb in adj[c] if owner[nb] >= 0}
            if owners:
                wave.append((c, min(owners, key=lambda r: (-area[r], r))))
        if not wave:
            break  # orphans cut off from every kept segment stay as they are
        for c, r in wave:
            owner[c] = r
            area[r] += sizes[c]
        done = {c for c, _ in wave}
        pending = [c for c in pending if c not in done]
    roots = np.where(owner >= 0, owner, np.arange(ncomp))
    out = np.full(labels.shape, -1, dtype=np.int64)
    out[inside] = roots[comp[inside]]
    flat = out.ravel()
    pos = np.flatnonzero(flat >= 0)
    uniq, first = np.unique(flat[pos], return_index=True)
    order = np.argsort(pos[first], kind="stable")
    remap = np.full(ncomp, -1, dtype=np.int64)
    remap[uniq[order]] = np.arange(len(uniq))
    flat[pos] = remap[flat[pos]]
    return out.astype(np.int32)


def slic(image: np.ndarray, mask: np.ndarray, k: int, compactness: float = 10.0,
         iterations: int = 10, min_component: int = 0, lab: np.ndarray | None = None) -> SuperpixelMap:
    """SLIC superpixels restricted to ``mask``.

    Distances combine CIELAB color and position,
    ``D = sqrt(d_lab^2 + (d_xy / S)^2 * m^2)`` with ``S = sqrt(|mask| / k)``.
    Each 4-connected component of the mask is segmented separately with a
    share of ``k`` proportional to its area; components smaller than
    ``min_component`` pixels are left in ``residual``.
    """
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if k < 1 or area < k:
        raise ContractError(f"mask of {area} pixels cannot hold {k} superpixels")
    if lab is None:
        lab = rgb2lab(np.clip(image, 0.0, 1.0))
    h, w = mask.shape
    comps, ncomp = ndimage.label(mask)
    comp_sizes = np.bincount(comps.ravel(), minlength=ncomp + 1)[1:]
    keep = np.flatnonzero(comp_sizes >= max(min_component, 1)) + 1
    residual = mask.copy()
    labels = np.full((h, w), -1, dtype=np.int32)
    if keep.size == 0:
        return SuperpixelMap(labels, 0, residual)
    shares = _apportion(k, comp_sizes[keep - 1].astype(float))
    objects = ndimage.find_objects(comps)
    offset = 0
    expected = area / k
    for comp_id, share in zip(keep, shares):
        sl = objects[comp_id - 1]
        sub_mask = comps[sl] == comp_id
        share = int(min(share, sub_mask.sum()))
        seeds = _grid_seeds(sub_mask, share)
        seeds = _perturb_seeds(seeds, lab[sl], sub_mask)
        seeds = np.unique(seeds, axis=0)
        sub = _kmeans(lab[sl], sub_mask, seeds, compactness, iterations)
        sub = enforce_connectivity(sub, sub_mask, max(1, int(expected * ORPHAN_FRACTION)))
        n = int(sub.max()) + 1
        region = labels[sl]
        region[sub_mask] = sub[sub_mask] + offset
        residual[sl][sub_mask] = False
        offset += n
    return SuperpixelMap(labels, offset, residual)
