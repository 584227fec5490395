"""Point <-> voxel bridging kernels.

``voxelize_*`` averages point features into the cells of an ``r x r x r``
grid; ``devoxelize_*`` reads grid features back at point locations by
trilinear interpolation. Coordinates are constants for both: gradients
flow only through features and grid data.

The ``*_batch`` variants work on ``[B, N, 3]`` coordinates and
channels-first ``[B, C, N]`` / ``[B, C, r, r, r]`` features, giving every
sample its own grid. The unbatched functions follow the per-cloud layout
``[N, 3]`` / ``[N, C]`` / ``[C, r, r, r]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# corner k = 4*i + 2*j + l takes the upper neighbor along x if i, y if j, z if l
_CORNER_BITS = np.array(
    [[i, j, l] for i in (0, 1) for j in (0, 1) for l in (0, 1)], dtype=np.int64
)


@dataclass(eq=False)
class VoxelGrid:
    resolution: int
    data: np.ndarray  # [C, r, r, r]
    counts: np.ndarray  # [r, r, r]
    point_index: np.ndarray  # [N] flat cell id of each point

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def _check_resolution(r):
    if int(r) != r or r < 2:
        raise ValueError(f"voxel resolution must be an integer >= 2, got {r}")
    return int(r)


def _check_bounds(coords_r, r):
    if coords_r.shape[-1] != 3:
        raise ValueError(f"coordinates must have a trailing axis of 3, got {coords_r.shape}")
    if coords_r.size and (coords_r.min() < 0 or coords_r.max() > r - 1):
        raise ValueError(
            f"scaled coordinates must lie in [0, {r - 1}], "
            f"got range [{coords_r.min()}, {coords_r.max()}]"
        )


def scale_coords(coords_hat: np.ndarray, r: int) -> np.ndarray:
    """Map unit-cube coordinates onto the voxel lattice ``[0, r-1]``."""
    r = _check_resolution(r)
    return np.clip(np.asarray(coords_hat) * (r - 1), 0, r - 1)


def voxel_index(coords_r: np.ndarray, r: int) -> np.ndarray:
    """Flat cell id ``(u*r + v)*r + w`` of the cell containing each point.

    A coordinate equal to ``r - 1`` stays in the last cell.
    """
    cell = np.minimum(np.floor(coords_r).astype(np.int64), r - 1)
    return (cell[..., 0] * r + cell[..., 1]) * r + cell[..., 2]


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------


def voxelize_batch(coords_r: np.ndarray, features: np.ndarray, r: int):
    """Average ``features [B, C, N]`` into per-sample grids ``[B, C, r, r, r]``.

    Returns ``(grid, counts, cache)`` with ``counts`` shaped ``[B, r, r, r]``.
    Sums are accumulated in float64 in point order, then cast back.
    """
    r = _check_resolution(r)
    _check_bounds(coords_r, r)
    B, C, N = features.shape
    if coords_r.shape != (B, N, 3):
        raise ValueError(f"coords {coords_r.shape} do not match features {features.shape}")
    cells = r**3
    gidx = (voxel_index(coords_r, r) + np.arange(B)[:, None] * cells).reshape(-1)
    counts = np.bincount(gidx, minlength=B * cells)

    ids = (gidx[None, :] + np.arange(C)[:, None] * (B * cells)).reshape(-1)
    vals = features.transpose(1, 0, 2).reshape(-1)
    sums = np.bincount(ids, weights=vals, minlength=C * B * cells).reshape(C, B * cells)
    mean = sums / np.maximum(counts, 1)
    grid = mean.reshape(C, B, r, r, r).transpose(1, 0, 2, 3, 4).astype(features.dtype)
    inv_count = (1.0 / counts[gidx]).reshape(B, N)
    return (
        np.ascontiguousarray(grid),
        counts.reshape(B, r, r, r),
        (gidx.reshape(B, N) - np.arange(B)[:, None] * cells, inv_count),
    )


def voxelize_batch_backward(dgrid: np.ndarray, cache) -> np.ndarray:
    """Each point receives its cell's gradient divided by the cell count."""
    local_idx, inv_count = cache
    B, C = dgrid.shape[:2]
    flat = dgrid.reshape(B, C, -1)
    picked = np.take_along_axis(flat, local_idx[:, None, :], axis=2)
    return (picked * inv_count[:, None, :]).astype(dgrid.dtype, copy=False)


def voxelize_avg(coords_r: np.ndarray, features: np.ndarray, r: int) -> VoxelGrid:
    """Bucket ``N`` points by their floored scaled coordinates and average
    their ``[N, C]`` features per cell. Empty cells hold zeros."""
    coords_r = np.asarray(coords_r)
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[:, None]
    if coords_r.ndim != 2 or features.shape[0] != coords_r.shape[0]:
        raise ValueError(
            f"expected coords [N,3] and features [N,C], got {coords_r.shape} and {features.shape}"
        )
    grid, counts, (idx, _) = voxelize_batch(coords_r[None], features.T[None], r)
    return VoxelGrid(int(r), grid[0], counts[0], idx[0])


def voxelize_avg_backward(dgrid: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """Gradient with respect to the ``[N, C]`` features for a ``[C, r, r, r]``
    upstream gradient."""
    counts = grid.counts.reshape(-1)[grid.point_index]
    return (dgrid.reshape(dgrid.shape[0], -1)[:, grid.point_index] / counts).T


# ---------------------------------------------------------------------------
# trilinear devoxelization
# ---------------------------------------------------------------------------


def trilinear_weights(coords_r: np.ndarray, r: int):
    """Flat ids and weights of the 8 lattice corners around each point.

    Returns ``(corners, weights)``, both shaped ``[..., 8]``. Along each
    axis the neighbors are ``floor(x)`` and ``floor(x) + 1`` clamped to
    ``r - 1``; the weights are products of per-axis linear weights.
    """
    lo = np.minimum(np.floor(coords_r), r - 1)
    frac = coords_r - lo
    lo = lo.astype(np.int64)
    hi = np.minimum(lo + 1, r - 1)
    bits = _CORNER_BITS
    # [..., 8, 3]
    idx = np.where(bits.astype(bool), hi[..., None, :], lo[..., None, :])
    axis_w = np.where(bits.astype(bool), frac[..., None, :], 1.0 - frac[..., None, :])
    weights = axis_w[..., 0] * axis_w[..., 1] * axis_w[..., 2]
    corners = (idx[..., 0] * r + idx[..., 1]) * r + idx[..., 2]
    return corners, weights


def devoxelize_batch(data: np.ndarray, coords_r: np.ndarray):
    """Interpolate ``data [B, C, r, r, r]`` at ``coords_r [B, N, 3]``;
    returns ``([B, C, N], cache)``."""
    B, C, r = data.shape[:3]
    _check_bounds(coords_r, r)
    if coords_r.shape[0] != B:
        raise ValueError(f"batch mismatch: grid {data.shape}, coords {coords_r.shape}")
    cells = r**3
    corners, weights = trilinear_weights(coords_r, r)
    weights = weights.astype(data.dtype)
    gidx = corners + (np.arange(B) * cells)[:, None, None]
    table = data.reshape(B, C, cells).transpose(0, 2, 1).reshape(B * cells, C)
    gathered = table[gidx]  # [B, N, 8, C]
    out = weights[..., 0, None] * gathered[:, :, 0]
    for k in range(1, 8):
        out += weights[..., k, None] * gathered[:, :, k]
    return np.ascontiguousarray(out.transpose(0, 2, 1)), (gidx, weights, data.shape)


def devoxelize_batch_backward(dout: np.ndarray, cache) -> np.ndarray:
    """Scatter ``w_corner * dout`` back into the corners of each point."""
    gidx, weights, shape = cache
    B, C, r = shape[:3]
    total = B * r**3
    ids = (gidx.reshape(-1)[None, :] + np.arange(C)[:, None] * total).reshape(-1)
    # [C, B, N, 8]
    vals = dout.transpose(1, 0, 2)[..., None] * weights[None]
    dgrid = np.bincount(ids, weights=vals.reshape(-1), minlength=C * total)
    dgrid = dgrid.reshape(C, B, r, r, r).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(dgrid.astype(dout.dtype))


def devoxelize_trilinear(grid, coords_r: np.ndarray) -> np.ndarray:
    """Per-point ``[N, C]`` features interpolated from a ``VoxelGrid`` (or a
    raw ``[C, r, r, r]`` array) at scaled coordinates ``[N, 3]``."""
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
    out, _ = devoxelize_batch(data[None], np.asarray(coords_r)[None])
    return out[0].T


def devoxelize_trilinear_backward(dout: np.ndarray, coords_r: np.ndarray, r: int) -> np.ndarray:
    """Gradient with respect to ``[C, r, r, r]`` grid data for an ``[N, C]``
    upstream gradient."""
    corners, weights = trilinear_weights(np.asarray(coords_r), r)
    cache = (corners[None], weights.astype(dout.dtype)[None], (1, dout.shape[1], r, r, r))
    return devoxelize_batch_backward(dout.T[None], cache)[0]
