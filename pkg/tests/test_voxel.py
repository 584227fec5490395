from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpvconv import voxel


def exact_bucket_mean(coords_r, feats, r):
    """Bucket by floor (r-1 stays in the last cell) and average with rationals."""
    sums, counts = {}, {}
    for p, f in zip(coords_r, feats):
        cell = tuple(min(int(np.floor(c)), r - 1) for c in p)
        acc = sums.setdefault(cell, [Fraction(0)] * len(f))
        for j, v in enumerate(f):
            acc[j] += Fraction(float(v))
        counts[cell] = counts.get(cell, 0) + 1
    return {c: [s / counts[c] for s in acc] for c, acc in sums.items()}, counts


def test_scale_coords_examples():
    assert voxel.scale_coords(np.zeros(3), 8).tolist() == [0, 0, 0]
    assert voxel.scale_coords(np.ones(3), 8).tolist() == [7, 7, 7]
    assert voxel.scale_coords(np.array([0.5, 0.25, 0.0]), 5).tolist() == [2.0, 1.0, 0.0]
    with pytest.raises(ValueError):
        voxel.scale_coords(np.zeros(3), 1)


def test_two_point_mean():
    g = voxel.voxelize_avg(np.array([[0.2] * 3, [0.9] * 3]), np.array([2.0, 4.0]), 4)
    assert g.data[0, 0, 0, 0] == 3.0 and g.counts[0, 0, 0] == 2
    assert g.counts.sum() == 2 and np.count_nonzero(g.data) == 1


def test_single_point_holds_its_feature(rng):
    f = rng.standard_normal(5)
    g = voxel.voxelize_avg(np.array([[1.3, 2.7, 0.4]]), f[None], 4)
    assert np.array_equal(g.data[:, 1, 2, 0], f) and g.counts[1, 2, 0] == 1


def test_upper_boundary_stays_in_last_cell():
    g = voxel.voxelize_avg(np.array([[3.0, 3.0, 3.0]]), np.array([1.0]), 4)
    assert g.counts[3, 3, 3] == 1


def test_voxelize_matches_rational_oracle(rng):
    r = 5
    coords = rng.uniform(0, r - 1, (100, 3))
    coords[:20] = np.floor(coords[:20])  # exercise exact lattice values
    feats = rng.standard_normal((100, 3))
    g = voxel.voxelize_avg(coords, feats, r)
    means, counts = exact_bucket_mean(coords, feats, r)
    for cell in product(range(r), repeat=3):
        if cell in means:
            assert g.counts[cell] == counts[cell]
            np.testing.assert_allclose(g.data[(slice(None),) + cell], [float(m) for m in means[cell]], atol=1e-6)
        else:
            assert g.counts[cell] == 0 and not g.data[(slice(None),) + cell].any()


def test_voxelize_rejects_out_of_bounds():
    with pytest.raises(ValueError, match="must lie in"):
        voxel.voxelize_avg(np.array([[4.5, 0, 0]]), np.ones(1), 4)
    with pytest.raises(ValueError):
        voxel.voxelize_avg(np.array([[-0.1, 0, 0]]), np.ones(1), 4)


@given(st.integers(1, 300), st.integers(2, 9), st.integers(0, 2**32 - 1))
def test_conservation_and_counts_single_precision(n, r, seed):
    g = np.random.default_rng(seed)
    coords = g.uniform(0, r - 1, (n, 3))
    feats = g.standard_normal((n, 2)).astype(np.float32)
    grid = voxel.voxelize_avg(coords, feats, r)
    assert grid.counts.sum() == n
    total = (grid.counts[None] * grid.data.astype(np.float64)).sum(axis=(1, 2, 3))
    np.testing.assert_allclose(total, feats.astype(np.float64).sum(axis=0), rtol=1e-4, atol=1e-4)


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_voxelize_permutation_invariance(n, seed):
    g = np.random.default_rng(seed)
    coords = g.uniform(0, 3, (n, 3))
    feats = g.standard_normal((n, 3)).astype(np.float32)
    perm = g.permutation(n)
    a = voxel.voxelize_avg(coords, feats, 4)
    b = voxel.voxelize_avg(coords[perm], feats[perm], 4)
    assert np.array_equal(a.counts, b.counts)
    assert np.abs(a.data - b.data).max() <= 1e-5


def test_empty_cells_hold_zero(rng):
    g = voxel.voxelize_avg(rng.uniform(0, 7, (10, 3)), rng.standard_normal((10, 2)), 8)
    assert not g.data[:, g.counts == 0].any()


def test_lattice_site_reproduces_data(rng):
    data = rng.standard_normal((3, 4, 4, 4))
    out = voxel.devoxelize_trilinear(data, np.array([[2.0, 3.0, 1.0]]))
    assert np.array_equal(out[0], data[:, 2, 3, 1])


def test_one_dimensional_interpolation():
    data = np.zeros((1, 2, 2, 2))
    data[0, 1, 0, 0] = 4.0
    assert voxel.devoxelize_trilinear(data, np.array([[0.25, 0, 0]]))[0, 0] == 1.0


def test_cell_centre_is_corner_mean(rng):
    data = rng.permutation(8).astype(float).reshape(1, 2, 2, 2) + 1
    out = voxel.devoxelize_trilinear(data, np.array([[0.5, 0.5, 0.5]]))
    assert np.isclose(out[0, 0], data.mean(), rtol=0, atol=1e-15)


def test_partition_of_unity_double(rng):
    for r in (2, 5, 16):
        _, w = voxel.trilinear_weights(rng.uniform(0, r - 1, (10**4, 3)), r)
        assert np.abs(w.sum(axis=-1) - 1).max() < 1e-12
        assert w.min() >= 0


@given(st.floats(-10, 10), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_constant_field_reproduction(c, r, seed):
    g = np.random.default_rng(seed)
    out = voxel.devoxelize_trilinear(np.full((2, r, r, r), c), g.uniform(0, r - 1, (50, 3)))
    np.testing.assert_allclose(out, c, atol=1e-6)


def test_lattice_round_trip_is_exact(rng):
    r = 5
    sites = np.array(list(product(range(r), repeat=3)), dtype=float)
    coords = sites[rng.choice(len(sites), 30, replace=False)]
    feats = rng.standard_normal((30, 4))
    back = voxel.devoxelize_trilinear(voxel.voxelize_avg(coords, feats, r), coords)
    assert np.array_equal(back, feats)


def test_batched_kernels_match_single_cloud(rng):
    r = 4
    coords = rng.uniform(0, r - 1, (3, 40, 3))
    feats = rng.standard_normal((3, 2, 40))
    grid, counts, _ = voxel.voxelize_batch(coords, feats, r)
    for b in range(3):
        single = voxel.voxelize_avg(coords[b], feats[b].T, r)
        assert np.array_equal(grid[b], single.data) and np.array_equal(counts[b], single.counts)
    out, _ = voxel.devoxelize_batch(grid, coords)
    for b in range(3):
        assert np.array_equal(out[b].T, voxel.devoxelize_trilinear(grid[b], coords[b]))


def test_voxelize_backward_divides_by_count():
    coords = np.array([[0.1] * 3, [0.2] * 3, [2.5] * 3])
    g = voxel.voxelize_avg(coords, np.zeros((3, 1)), 4)
    dgrid = np.zeros((1, 4, 4, 4))
    dgrid[0, 0, 0, 0] = 6.0
    dgrid[0, 2, 2, 2] = 1.0
    assert voxel.voxelize_avg_backward(dgrid, g)[:, 0].tolist() == [3.0, 3.0, 1.0]


def test_devoxelize_backward_is_transpose(rng):
    r = 4
    coords = rng.uniform(0, r - 1, (25, 3))
    data = rng.standard_normal((2, r, r, r))
    dout = rng.standard_normal((25, 2))
    lhs = (voxel.devoxelize_trilinear(data, coords) * dout).sum()
    rhs = (data * voxel.devoxelize_trilinear_backward(dout, coords, r)).sum()
    assert np.isclose(lhs, rhs, rtol=1e-12)
