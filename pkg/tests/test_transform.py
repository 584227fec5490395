from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpvconv.transform import RawCloud, normalize_coords


def cloud(coords, c1=1):
    coords = np.asarray(coords, dtype=float)
    return RawCloud(coords, np.ones((len(coords), c1), np.float32))


def test_symmetric_pair():
    n = normalize_coords(cloud([[-1, 0, 0], [1, 0, 0]]))
    assert n.centroid.tolist() == [0, 0, 0] and n.radius == 1
    assert n.coords_hat.tolist() == [[0, 0.5, 0.5], [1, 0.5, 0.5]]


def test_coincident_points_map_to_centre():
    n = normalize_coords(cloud([[7, -3, 2]] * 5))
    assert n.radius == 0
    assert np.all(n.coords_hat == 0.5)


def test_three_point_example_against_exact_arithmetic():
    pts = [[2, 2, 2], [4, 2, 2], [2, 4, 2]]
    n = normalize_coords(cloud(pts))
    # oracle: rational centroid, radius^2 = 20/9
    c = [sum(Fraction(p[i]) for p in pts) / 3 for i in range(3)]
    assert c == [Fraction(8, 3), Fraction(8, 3), Fraction(2)]
    r = (Fraction(20, 9)) ** 0.5
    expect = [float((Fraction(pts[0][i]) - c[i])) / (2 * r) + 0.5 for i in range(3)]
    np.testing.assert_allclose(n.coords_hat[0], expect, atol=1e-12)
    np.testing.assert_allclose(n.coords_hat[0], [0.2764, 0.2764, 0.5], atol=1e-4)
    assert np.isclose(n.radius, np.sqrt(20) / 3)


def test_features_pass_through_bit_identical(rng):
    feats = rng.standard_normal((30, 4)).astype(np.float32)
    c = RawCloud(rng.standard_normal((30, 3)) * 50, feats)
    n = normalize_coords(c)
    assert n.features is feats or np.array_equal(n.features, feats)
    assert n.features.dtype == np.float32


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_output_in_unit_cube_with_centred_mean(n, seed):
    r = np.random.default_rng(seed)
    coords = r.standard_normal((n, 3)) * r.uniform(0.01, 100) + r.uniform(-1e3, 1e3, 3)
    out = normalize_coords(cloud(coords)).coords_hat
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out.mean(axis=0), [0.5, 0.5, 0.5], atol=1e-6)


@given(st.floats(0.1, 10), st.tuples(*[st.floats(-100, 100)] * 3), st.integers(0, 2**32 - 1))
def test_similarity_invariance_single_precision(s, t, seed):
    r = np.random.default_rng(seed)
    p = r.standard_normal((64, 3)).astype(np.float32)
    moved = (s * p.astype(np.float64) + np.array(t)).astype(np.float32)
    a = normalize_coords(cloud(p)).coords_hat
    b = normalize_coords(cloud(moved)).coords_hat
    # float32 storage of the moved cloud limits agreement to about eps32*|t|/s
    np.testing.assert_allclose(a, b, atol=1e-6 + 2e-7 * max(map(abs, t)) / s)


@given(st.floats(0.1, 10), st.tuples(*[st.floats(-100, 100)] * 3), st.integers(0, 2**32 - 1))
def test_similarity_invariance_double(s, t, seed):
    r = np.random.default_rng(seed)
    p = r.standard_normal((64, 3))
    a = normalize_coords(cloud(p)).coords_hat
    b = normalize_coords(cloud(s * p + np.array(t))).coords_hat
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_rawcloud_validation():
    with pytest.raises(ValueError):
        RawCloud(np.zeros((0, 3)), np.zeros((0, 1)))
    with pytest.raises(ValueError, match="finite"):
        RawCloud(np.array([[np.nan, 0, 0]]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        RawCloud(np.zeros((2, 3)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        RawCloud(np.zeros((2, 3)), np.zeros((2, 1)), labels=[0])


def test_permuted_keeps_rows_together(rng):
    c = RawCloud(rng.standard_normal((5, 3)), rng.standard_normal((5, 2)), np.arange(5), 5)
    perm = rng.permutation(5)
    p = c.permuted(perm)
    assert np.array_equal(p.coords, c.coords[perm]) and np.array_equal(p.labels, perm)
