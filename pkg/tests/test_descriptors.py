import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import textured
from hybridflow.descriptors import (
    DescriptorParams,
    classify_pixels,
    color_stats,
    dense_descriptors,
    descriptor_distance,
    rootsift_normalize,
)
from hybridflow.errors import ContractError


def test_constant_image_gives_zero_descriptors():
    d = dense_descriptors(np.full((20, 24, 3), 0.3))
    assert d.shape == (20, 24, 128) and d.dtype == np.float32
    assert not d.any()
    assert (classify_pixels(d) == 0).all()


def test_norm_bounded():
    d = dense_descriptors(textured(48, seed=1)).astype(np.float64)
    n2 = (d * d).sum(axis=-1)
    assert n2.max() <= 1 + 1e-6
    # nonzero rootSIFT vectors have unit L2 norm
    assert np.allclose(n2[n2 > 0], 1.0, atol=1e-5)


def rotation_permutation(cells=4, bins=8):
    """Channel map for a 90 degree counter-clockwise image rotation.

    A pixel offset ``(dy, dx)`` moves to ``(-dx, dy)`` and a gradient angle
    drops by a quarter turn, i.e. ``bins / 4`` bins.
    """
    perm = np.empty(cells * cells * bins, dtype=np.int64)
    for cy in range(cells):
        for cx in range(cells):
            for o in range(bins):
                ny, nx, no = cells - 1 - cx, cy, (o - bins // 4) % bins
                perm[(ny * cells + nx) * bins + no] = (cy * cells + cx) * bins + o
    return perm


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rotation_permutes_bins(seed):
    img = textured(41, seed=seed)
    c = 20
    a = dense_descriptors(img)[c, c]
    b = dense_descriptors(np.ascontiguousarray(np.rot90(img)))[c, c]
    np.testing.assert_allclose(b, a[rotation_permutation()], atol=1e-4)


def test_translation_equivariance():
    big = textured(90, seed=4)
    dx, dy = 5, 3
    a = dense_descriptors(big[10:70, 10:70])
    b = dense_descriptors(big[10 + dy:70 + dy, 10 + dx:70 + dx])
    m = 16
    np.testing.assert_allclose(a[m + dy:-m, m + dx:-m], b[m:-m - dy, m:-m - dx], atol=1e-6)


def test_small_image_rejected():
    with pytest.raises(ContractError):
        dense_descriptors(np.zeros((10, 40, 3)))


def test_params_dims():
    p = DescriptorParams(patch_size=8, cells=2, bins=4)
    assert p.dims == 16 and p.cell_width == 4
    assert dense_descriptors(textured(20), p).shape == (20, 20, 16)


def test_rootsift_zero_vector():
    out = rootsift_normalize(np.zeros((2, 5)))
    assert not out.any() and np.isfinite(out).all()


def test_classify_examples():
    assert classify_pixels(np.array([[[0.1, 0.9, 0.3]]]))[0, 0] == 1
    assert classify_pixels(np.array([[[-1.0, -2.0, -0.5]]]))[0, 0] == 0
    assert classify_pixels(np.array([[[0.4, 0.4, 0.1]]]))[0, 0] == 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, (3, 4, 6), elements=st.integers(0, 64)), st.sampled_from(["exp", "sigmoid", "cube"]))
def test_classify_invariant_under_monotone_maps(grid, g):
    # a coarse grid keeps the maps strictly increasing in floating point
    field = grid / 64.0
    fn = {"exp": np.exp, "sigmoid": lambda x: 1 / (1 + np.exp(-x)), "cube": lambda x: x**3 + x}[g]
    assert (classify_pixels(field) == classify_pixels(fn(field))).all()


def test_color_stats_examples():
    img = np.zeros((2, 2, 3))
    img[0, 0] = (0.2, 0.4, 0.6)
    np.testing.assert_allclose(color_stats(img, ([0], [0])), [0.2, 0.4, 0.6, 0, 0, 0])
    img[0, 1, 0] = 1.0
    s = color_stats(img, ([0, 0], [0, 1]))
    assert s[0] == pytest.approx(0.6) and s[3] == pytest.approx(0.4)
    img2 = np.zeros((1, 2, 3))
    img2[0, 1, 0] = 1.0
    s = color_stats(img2, np.ones((1, 2), bool))
    assert s[0] == 0.5 and s[3] == 0.5
    with pytest.raises(ContractError):
        color_stats(img, np.zeros((2, 2), bool))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_color_stats_two_pass_oracle_and_permutation(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((5, 6, 3))
    ys = rng.integers(0, 5, 10)
    xs = rng.integers(0, 6, 10)
    got = color_stats(img, (ys, xs))
    px = [img[y, x] for y, x in zip(ys, xs)]
    mu = [sum(p[c] for p in px) / 10 for c in range(3)]
    sd = [(sum((p[c] - mu[c]) ** 2 for p in px) / 10) ** 0.5 for c in range(3)]
    np.testing.assert_allclose(got, mu + sd, atol=1e-12)
    perm = rng.permutation(10)
    np.testing.assert_allclose(color_stats(img, (ys[perm], xs[perm])), got, atol=1e-12)


def test_distance_examples():
    assert descriptor_distance([1, 0], [0, 1], "l1") == 2.0
    assert descriptor_distance([1, 0], [0, 1], "l2") == pytest.approx(np.sqrt(2))
    assert descriptor_distance([3, 4], [3, 4], "l2") == 0.0
    with pytest.raises(ContractError):
        descriptor_distance([1], [1, 2])
    with pytest.raises(ValueError):
        descriptor_distance([1], [1], "linf")


vec = arrays(np.float64, 5, elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(vec, vec, vec, st.sampled_from(["l1", "l2"]))
def test_distance_is_metric(a, b, c, norm):
    ab = descriptor_distance(a, b, norm)
    assert ab >= 0 and ab == descriptor_distance(b, a, norm)
    assert descriptor_distance(a, c, norm) <= ab + descriptor_distance(b, c, norm) + 1e-9
