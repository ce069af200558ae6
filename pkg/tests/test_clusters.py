import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridflow.clusters import (
    AREA_THRESHOLD,
    Cluster,
    ClusterPair,
    Route,
    build_clusters,
    min_match_filter,
    pair_clusters,
    route_for,
)


def _cluster(index, area, shape=(1000, 1000)):
    idx = np.arange(area)
    return Cluster(index, idx // shape[1], idx % shape[1], shape)


def test_uniform_map_single_cluster():
    cl = build_clusters(np.full((7, 9), 3))
    assert len(cl) == 1 and cl[0].index == 3 and cl[0].area == 63
    assert cl[0].bbox == (0, 0, 7, 9)


def test_checkerboard_two_halves():
    yy, xx = np.mgrid[0:6, 0:8]
    cl = build_clusters((yy + xx) % 2)
    assert [c.area for c in cl] == [24, 24]
    assert not (cl[0].mask() & cl[1].mask()).any()


@settings(max_examples=50, deadline=None)
@given(arrays(np.int32, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 5)))
def test_partition(labels):
    cl = build_clusters(labels)
    assert sum(c.area for c in cl) == labels.size
    cover = np.zeros(labels.shape, int)
    for c in cl:
        assert (labels[c.ys, c.xs] == c.index).all()
        cover[c.ys, c.xs] += 1
        # raster order within a cluster
        flat = c.ys * labels.shape[1] + c.xs
        assert (np.diff(flat) > 0).all()
    assert (cover == 1).all()
    assert [c.index for c in cl] == sorted(c.index for c in cl)


def test_full_frame_is_large():
    h, w = 436, 1024
    lab = np.full((h, w), 7)
    pairs = pair_clusters(build_clusters(lab), build_clusters(lab))
    assert len(pairs) == 1 and pairs[0].route is Route.LARGE and pairs[0].first.area == 446464


def test_route_threshold_is_conjunctive_and_strict():
    assert route_for(9_999, 20_000) is Route.SMALL
    assert route_for(20_000, 9_999) is Route.SMALL
    assert route_for(AREA_THRESHOLD, 20_000) is Route.SMALL
    assert route_for(AREA_THRESHOLD + 1, AREA_THRESHOLD + 1) is Route.LARGE


@settings(max_examples=50)
@given(st.integers(0, 30_000), st.integers(0, 30_000))
def test_route_symmetric(a, b):
    assert route_for(a, b) is route_for(b, a)


def test_unmatched_index_skipped():
    pairs = pair_clusters([_cluster(1, 100), _cluster(2, 100)], [_cluster(2, 100)])
    assert [(p.index, p.route) for p in pairs] == [(1, Route.SKIPPED), (2, Route.SMALL)]
    assert pairs[0].second is None


def test_min_match_filter():
    small = ClusterPair(0, _cluster(0, 8), _cluster(0, 100), Route.SMALL)
    assert not min_match_filter(small)
    ok = ClusterPair(0, _cluster(0, 16), _cluster(0, 16), Route.SMALL)
    assert min_match_filter(ok)
    large = ClusterPair(0, _cluster(0, 20_000), _cluster(0, 20_000), Route.LARGE)
    assert min_match_filter(large, min_pixels=10**9)
    pairs = pair_clusters([_cluster(4, 8)], [_cluster(4, 200)])
    assert pairs[0].route is Route.SKIPPED


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 9), unique=True), st.lists(st.integers(0, 9), unique=True))
def test_pairing_is_partial_bijection(a, b):
    pairs = pair_clusters([_cluster(i, 50) for i in a], [_cluster(i, 50) for i in b])
    assert [p.index for p in pairs] == sorted(set(a) | set(b))
    for p in pairs:
        both = p.index in a and p.index in b
        assert (p.route is not Route.SKIPPED) == both
