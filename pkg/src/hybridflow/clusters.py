"""Coarse clusters from the label map, index-based pairing and routing."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

AREA_THRESHOLD = 10_000
MIN_MATCH_PIXELS = 16


class Route(enum.Enum):
    LARGE = "large"
    SMALL = "small"
    SKIPPED = "skipped"


@dataclass
class Cluster:
    """All pixels of one frame carrying class ``index`` (not necessarily connected)."""

    index: int
    ys: np.ndarray
    xs: np.ndarray
    shape: tuple[int, int]

    @property
    def area(self) -> int:
        return int(self.ys.size)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """``(y0, x0, y1, x1)`` with exclusive upper bounds."""
        return (int(self.ys.min()), int(self.xs.min()), int(self.ys.max()) + 1, int(self.xs.max()) + 1)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[self.ys, self.xs] = True
        return m


@dataclass
class ClusterPair:
    index: int
    first: Cluster | None
    second: Cluster | None
    route: Route


def build_clusters(labels: np.ndarray) -> list[Cluster]:
    """One cluster per distinct label, ascending by index.

    Pixels within a cluster are listed in raster order.
    """
    labels = np.asarray(labels)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    values, starts, counts = np.unique(flat[order], return_index=True, return_counts=True)
    w = labels.shape[1]
    clusters = []
    for value, start, count in zip(values, starts, counts):
        idx = order[start:start + count]
        clusters.append(Cluster(int(value), idx // w, idx % w, labels.shape))
    return clusters


def min_match_filter(pair: ClusterPair, min_pixels: int = MIN_MATCH_PIXELS) -> bool:
    """True when the pair keeps its route.

    Small pairs with fewer than ``min_pixels`` pixels in either frame cannot
    support an eight-point RANSAC and are dropped; Large pairs always pass.
    """
    if pair.route is Route.LARGE:
        return True
    if pair.route is Route.SKIPPED:
        return False
    return pair.first.area >= min_pixels and pair.second.area >= min_pixels


def route_for(area1: int, area2: int, threshold: int = AREA_THRESHOLD) -> Route:
    """Large only when both areas strictly exceed ``threshold``."""
    return Route.LARGE if area1 > threshold and area2 > threshold else Route.SMALL


def pair_clusters(first: list[Cluster], second: list[Cluster],
                  threshold: int = AREA_THRESHOLD,
                  min_pixels: int = MIN_MATCH_PIXELS) -> list[ClusterPair]:
    """Pair clusters sharing a class index across the two frames.

    Indices present in only one frame are marked SKIPPED, as are Small pairs
    failing :func:`min_match_filter`. The result is sorted by index.
    """
    by_index_1 = {c.index: c for c in first}
    by_index_2 = {c.index: c for c in second}
    pairs = []
    for index in sorted(set(by_index_1) | set(by_index_2)):
        c1 = by_index_1.get(index)
        c2 = by_index_2.get(index)
        if c1 is None or c2 is None:
            pairs.append(ClusterPair(index, c1, c2, Route.SKIPPED))
            continue
        pair = ClusterPair(index, c1, c2, route_for(c1.area, c2.area, threshold))
        if not min_match_filter(pair, min_pixels):
            pair.route = Route.SKIPPED
        pairs.append(pair)
    return pairs
