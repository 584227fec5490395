"""From points to a grid and back.

Run with ``python demos/01_voxel_bridge.py``. Each cell prints what it shows.
"""

# %% A cloud in an arbitrary pose is centred and scaled into the unit cube.
import numpy as np

from mpvconv import voxel
from mpvconv.transform import RawCloud, normalize_coords

rng = np.random.default_rng(0)
pts = rng.standard_normal((500, 3)) * [3.0, 1.0, 0.5] + [40.0, -7.0, 2.0]
cloud = RawCloud(pts, np.linalg.norm(pts - pts.mean(0), axis=1, keepdims=True).astype(np.float32))
norm = normalize_coords(cloud)
print("centroid", norm.centroid.round(3), "radius", round(norm.radius, 3))
print("coords_hat range", norm.coords_hat.min(0).round(3), norm.coords_hat.max(0).round(3))

# %% Moving and scaling the cloud leaves the normalized coordinates alone.
moved = normalize_coords(RawCloud(2.5 * pts + [100.0, 3.0, -50.0], cloud.features))
print("max change after a similarity:", np.abs(moved.coords_hat - norm.coords_hat).max())

# %% Voxelize at r = 8: each occupied cell holds the mean feature of its points.
r = 8
coords_r = voxel.scale_coords(norm.coords_hat, r)
grid = voxel.voxelize_avg(coords_r, cloud.features, r)
occupied = grid.counts > 0
print(f"{occupied.sum()} of {r**3} cells occupied, counts sum to {grid.counts.sum()}")
print("feature total before/after:", cloud.features.sum(), (grid.counts * grid.data[0]).sum())

# %% Trilinear devoxelization reads the grid back at every point.
back = voxel.devoxelize_trilinear(grid.data, coords_r)
err = np.abs(back[:, 0] - cloud.features[:, 0])
print(f"round-trip |error|: mean {err.mean():.3f}, max {err.max():.3f} (the grid smooths)")

# %% The interpolation weights at any point sum to one.
_, w = voxel.trilinear_weights(rng.uniform(0, r - 1, (10_000, 3)), r)
print("max |sum of weights - 1|:", np.abs(w.sum(-1) - 1).max())

# %% A finer grid keeps more detail until most cells hold a single point or none;
# empty cells read as zero, which pulls interpolation near them down.
for res in (4, 8, 16, 32):
    cr = voxel.scale_coords(norm.coords_hat, res)
    g = voxel.voxelize_avg(cr, cloud.features, res)
    e = np.abs(voxel.devoxelize_trilinear(g.data, cr)[:, 0] - cloud.features[:, 0]).mean()
    print(f"r={res:2d}  occupied {int((g.counts > 0).sum()):4d}  mean round-trip error {e:.4f}")
