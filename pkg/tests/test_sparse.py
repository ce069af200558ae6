import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import shifted_pair, textured
from hybridflow.descriptors import dense_descriptors, rootsift_normalize
from hybridflow.errors import ContractError
from hybridflow.graph import graph_from_points
from hybridflow.sparse import (
    ORIGIN_GRAPH,
    ORIGIN_SMALL,
    SeedSet,
    affine_consistency,
    eight_point,
    match_pixels,
    ransac_fundamental,
    sampson_distance,
    seeds_from_superpixel_matches,
)


def two_view(n, seed, noise=0.0):
    """Projections of random 3-D points into two cameras, with their true F."""
    rng = np.random.default_rng(seed)
    X = np.c_[rng.uniform(-2, 2, (n, 2)), rng.uniform(4, 9, n)]
    K = np.array([[300.0, 0, 160], [0, 300.0, 120], [0, 0, 1]])
    a = 0.15
    R = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    t = np.array([0.8, 0.1, 0.05])
    x1 = (K @ X.T).T
    x2 = (K @ (R @ X.T + t[:, None])).T
    p1 = x1[:, :2] / x1[:, 2:]
    p2 = x2[:, :2] / x2[:, 2:]
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ tx @ R @ Kinv
    return p1 + noise * rng.standard_normal(p1.shape), p2 + noise * rng.standard_normal(p2.shape), F


def sampson_oracle(F, a, b):
    x1 = np.array([a[0], a[1], 1.0])
    x2 = np.array([b[0], b[1], 1.0])
    Fx1 = F @ x1
    Ftx2 = F.T @ x2
    return (x2 @ F @ x1) ** 2 / (Fx1[0] ** 2 + Fx1[1] ** 2 + Ftx2[0] ** 2 + Ftx2[1] ** 2)


def test_eight_point_exact():
    p1, p2, F_true = two_view(20, 0)
    F, ok = eight_point(p1[None], p2[None])
    assert ok[0]
    F = F[0]
    assert np.linalg.matrix_rank(F, tol=1e-8 * np.abs(F).max()) == 2
    assert sampson_distance(F[None], p1, p2).max() < 1e-10
    np.testing.assert_allclose(F / np.linalg.norm(F), np.sign((F * F_true).sum()) * F_true / np.linalg.norm(F_true),
                               atol=1e-6)


def test_sampson_matches_oracle():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((3, 3))
    p1 = rng.random((6, 2)) * 50
    p2 = rng.random((6, 2)) * 50
    got = sampson_distance(F[None], p1, p2)[0]
    ref = [np.sqrt(sampson_oracle(F, a, b)) for a, b in zip(p1, p2)]
    # the distance is the square root of the first-order geometric error
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_eight_point_flags_degenerate_samples():
    p = np.random.default_rng(2).random((8, 2))
    _, ok = eight_point(p[None], p[None] + 1.0)  # pure translation: rank-deficient design
    assert not ok[0]


def test_ransac_rejects_outliers():
    p1, p2, _ = two_view(100, 3)
    rng = np.random.default_rng(4)
    bad = rng.choice(100, 20, replace=False)
    p2[bad] += rng.uniform(15, 40, (20, 2)) * rng.choice([-1, 1], (20, 2))
    res = ransac_fundamental(p1, p2, seed=7)
    assert res.model == "fundamental" and res.F is not None
    truth = np.ones(100, bool)
    truth[bad] = False
    assert (res.inliers == truth).all()


def test_ransac_is_deterministic_per_region():
    p1, p2, _ = two_view(60, 5, noise=0.3)
    p2[:10] += 25
    a = ransac_fundamental(p1, p2, seed=1, region_id=3)
    b = ransac_fundamental(p1, p2, seed=1, region_id=3)
    assert (a.inliers == b.inliers).all() and np.array_equal(a.F, b.F)
    assert a.iterations == b.iterations


def test_ransac_translation_uses_affine_model():
    rng = np.random.default_rng(6)
    p1 = rng.random((100, 2)) * 100
    p2 = p1 + [7.0, 3.0]
    clean = ransac_fundamental(p1, p2)
    assert clean.model == "affine" and clean.warnings and clean.inliers.all()
    # a translation admits a family of F that can absorb a few outliers;
    # the affine consensus still covers over 95% of the best F consensus
    ang = rng.uniform(0, 2 * np.pi, 5)
    p2[:5] += rng.uniform(10, 20, (5, 1)) * np.c_[np.cos(ang), np.sin(ang)]
    res = ransac_fundamental(p1, p2)
    assert res.model == "affine"
    assert not res.inliers[:5].any() and res.inliers[5:].all()
    np.testing.assert_allclose(res.A, [[1, 0, 7], [0, 1, 3]], atol=1e-9)


def test_ransac_passthrough_and_contract():
    res = ransac_fundamental(np.zeros((5, 2)), np.ones((5, 2)))
    assert res.model == "passthrough" and res.inliers.all() and res.warnings
    with pytest.raises(ContractError):
        ransac_fundamental(np.zeros((9, 2)), np.zeros((8, 2)))


@pytest.fixture(scope="module")
def fields():
    i1, i2 = shifted_pair(96, 5, 2, margin=12)
    return dense_descriptors(i1), dense_descriptors(i2)


def _box(y0, y1, x0, x1):
    yy, xx = np.mgrid[y0:y1, x0:x1]
    return yy.ravel(), xx.ravel()


def test_match_pixels_recovers_shift(fields):
    f1, f2 = fields
    s = match_pixels(_box(20, 60, 20, 60), _box(10, 80, 10, 80), f1, f2)
    assert len(s) > 100
    assert (s.u == 5).mean() > 0.95 and (s.v == 2).mean() > 0.95
    assert (s.x1 % 2 == 0).all() and (s.y1 % 2 == 0).all()
    assert (s.origin == ORIGIN_SMALL).all()
    # mutual: no frame-2 pixel used twice
    assert len(set(zip(s.x2.tolist(), s.y2.tolist()))) == len(s)


def test_match_pixels_horizontal_shift_is_exact():
    i1, i2 = shifted_pair(96, 5, 0, margin=12)
    f1, f2 = dense_descriptors(i1), dense_descriptors(i2)
    s = match_pixels(_box(20, 60, 20, 60), _box(20, 60, 25, 65), f1, f2)
    assert len(s) == 20 * 20
    assert (s.u == 5).all() and (s.v == 0).all()


def test_match_pixels_noise_is_rejected():
    rng = np.random.default_rng(0)
    f1 = rootsift_normalize(rng.random((60, 60, 128))).astype(np.float32)
    f2 = rootsift_normalize(rng.random((60, 60, 128))).astype(np.float32)
    s = match_pixels(_box(10, 50, 10, 50), _box(10, 50, 10, 50), f1, f2)
    assert len(s) < 0.05 * 20 * 20


def test_match_pixels_ratio_is_monotone(fields):
    f1, f2 = fields
    r1, r2 = _box(20, 50, 20, 50), _box(10, 70, 10, 70)
    loose = match_pixels(r1, r2, f1, f2, ratio=1.0)
    strict = match_pixels(r1, r2, f1, f2, ratio=0.6)
    assert len(strict) <= len(loose)
    keys = set(zip(loose.x1.tolist(), loose.y1.tolist()))
    assert set(zip(strict.x1.tolist(), strict.y1.tolist())) <= keys


def test_match_pixels_empty(fields):
    f1, f2 = fields
    empty = (np.zeros(0, int), np.zeros(0, int))
    assert len(match_pixels(empty, _box(0, 5, 0, 5), f1, f2)) == 0
    assert len(match_pixels(([1], [1]), _box(0, 5, 0, 5), f1, f2)) == 0  # off the stride grid


def test_superpixel_seeds(fields):
    f1, f2 = fields
    members1 = [_box(20, 40, 20, 40), _box(40, 60, 40, 60)]
    members2 = [_box(22, 42, 25, 45), _box(42, 62, 45, 65)]
    s = seeds_from_superpixel_matches(np.array([[0, 0], [1, 1]]), members1, members2, f1, f2)
    assert len(s) > 20 and (s.origin == ORIGIN_GRAPH).all()
    assert ((s.u == 5) & (s.v == 2)).mean() > 0.95
    assert set(np.unique(s.region)) <= {0, 1}


def test_affine_consistency_flags_outlier():
    yy, xx = np.mgrid[0:6, 0:6]
    pos1 = np.stack([xx.ravel(), yy.ravel()], 1) * 20.0
    pos2 = pos1 @ np.array([[1.05, 0.1], [-0.05, 0.95]]).T + [4.0, -3.0]
    pos2[14] += [25.0, -18.0]
    g = graph_from_points(pos1)
    keep = affine_consistency(pos1, pos2, g.neighbors(), np.ones(36, bool))
    assert not keep[14] and keep.sum() == 35
    matched = np.ones(36, bool)
    matched[14] = False
    keep = affine_consistency(pos1, pos2, g.neighbors(), matched)
    assert keep.sum() == 35 and not keep[14]


def test_affine_consistency_rejects_50px_displacement():
    rng = np.random.default_rng(9)
    pos1 = rng.random((40, 2)) * 300
    pos2 = pos1 @ np.array([[0.98, 0.05], [-0.03, 1.02]]).T + [6.0, 2.0]
    pos2[7] += [50.0, 0.0]
    keep = affine_consistency(pos1, pos2, graph_from_points(pos1).neighbors(), np.ones(40, bool))
    assert not keep[7] and keep.sum() == 39


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_affine_consistency_keeps_exact_motion(seed):
    rng = np.random.default_rng(seed)
    pos1 = rng.random((25, 2)) * 100
    A = np.eye(2) + 0.2 * rng.standard_normal((2, 2))
    pos2 = pos1 @ A.T + rng.standard_normal(2) * 10
    g = graph_from_points(pos1)
    assert affine_consistency(pos1, pos2, g.neighbors(), np.ones(25, bool)).all()


def test_seedset_helpers():
    a = SeedSet(np.array([1, 2]), np.array([3, 4]), np.array([2, 2]), np.array([3, 6]),
                np.zeros(2), np.zeros(2, int), np.array([ORIGIN_GRAPH, ORIGIN_SMALL]))
    both = SeedSet.concat([a, SeedSet.empty(), a])
    assert len(both) == 4
    assert both.count_by_origin() == {"graph": 2, "small-cluster": 2}
    np.testing.assert_array_equal(a.u, [1, 0])
    np.testing.assert_array_equal(a.take([1]).v, [2])
    assert len(SeedSet.concat([])) == 0


def test_textured_helper_is_normalized():
    t = textured(20)
    assert t.min() == 0.0 and t.max() == 1.0
