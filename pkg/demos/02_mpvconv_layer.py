"""One MPVConv layer, its four feature streams and their combinations.

Run with ``python demos/02_mpvconv_layer.py``.
"""

# %% Build a layer: 4 input channels, 16 output channels, a 8^3 voxel grid.
import numpy as np

from mpvconv.layer import COMBINATIONS, MPVConvConfig, MPVConvLayer
from mpvconv.verify import check_layer

rng = np.random.default_rng(1)
coords = rng.uniform(0, 1, (2, 256, 3))
feats = rng.standard_normal((2, 4, 256)).astype(np.float32)
layer = MPVConvLayer(MPVConvConfig(4, 16, resolution=8), np.float32).init_parameters(0).eval()
print(layer.config)
print("parameters:", layer.num_parameters())

# %% The initialization module gives a voxel stream V1 and a point stream P1;
# the fusion module reads V1 + P1 and gives V2 and P2.
V1, P1 = layer.init_module_forward(coords, feats)
V2, P2 = layer.fusion_module_forward(coords, V1, P1)
for name, x in dict(V1=V1, P1=P1, V2=V2, P2=P2).items():
    print(f"{name}: shape {x.shape}, mean |x| {np.abs(x).mean():.3f}")

# %% The layer output is the sum of a chosen subset of the four.
for mode, parts in COMBINATIONS.items():
    out = MPVConvLayer(MPVConvConfig(4, 16, resolution=8, combination_mode=mode), np.float32)
    out = out.init_parameters(0).eval().forward(coords, feats)
    print(f"mode {mode}: {'+'.join(parts):12s} mean |out| {np.abs(out).mean():.3f}")

# %% Mode B with fusion on computes exactly what a fusion-free layer computes.
on = MPVConvLayer(MPVConvConfig(4, 16, resolution=8, combination_mode="B"), np.float32).init_parameters(0)
off = MPVConvLayer(MPVConvConfig(4, 16, resolution=8, fusion_enabled=False), np.float32).init_parameters(0)
print("bit-identical:", np.array_equal(on.forward(coords, feats), off.forward(coords, feats)))

# %% Shuffling the points shuffles the output the same way.
perm = rng.permutation(256)
shuffled = layer.forward(coords[:, perm], feats[:, :, perm])
print("max permutation error:", np.abs(layer.forward(coords, feats)[:, :, perm] - shuffled).max())

# %% The hand-written backward pass agrees with central differences.
for mode in "BGH":
    rep = check_layer(0, mode)
    print(f"mode {mode}: max relative error {rep.max_relative_error:.1e} over {rep.n_checked} coordinates")
