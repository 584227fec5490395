"""Train on synthetic hemispheres and compare with a point-only network.

Run with ``python demos/03_hemispheres.py`` (a few minutes on one core).
"""

# %% Data: unit spheres in random poses, labelled by canonical hemisphere.
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from mpvconv.data import Dataset, SyntheticSpec, dump_predictions, generate_synthetic, read_predictions
from mpvconv.model import MPVCNN, MPVCNNConfig, build_mpvcnn, point_only_baseline, predict
from mpvconv.train import TrainConfig, evaluate, train
from mpvconv.transform import RawCloud, normalize_coords

train_set = generate_synthetic(SyntheticSpec(100, 256, 0.02), seed=0)
val_set = generate_synthetic(SyntheticSpec(30, 256, 0.02), seed=1)
cloud = train_set[0]
print(f"{len(train_set)} training clouds, {cloud.num_points} points each, upper share {cloud.labels.mean():.2f}")

# %% The default network. Its only input feature is a constant, so everything
# it learns about shape has to come through the voxel branches.
tcfg = TrainConfig(batch_size=8, learning_rate=1e-3, epochs=3, seed=0)
mpv_cfg = MPVCNNConfig()
model = build_mpvcnn(mpv_cfg, seed=0)
t0 = time.perf_counter()
result = train(model, train_set, tcfg, val_set)
for m in result.history:
    print(f"epoch {m.epoch}: loss {m.train_loss:.4f}  val mIoU {m.val_miou:.4f}  val mAcc {m.val_macc:.4f}")
print(f"{time.perf_counter() - t0:.0f}s")

# %% A per-class view and a dump for plotting elsewhere.
print(evaluate(model, val_set).format(), end="")
out = Path(tempfile.mkdtemp()) / "val_0000.txt"
dump_predictions(val_set[0], predict(model, val_set[0]), out)
_, true, pred = read_predictions(out)
print(f"dumped {len(pred)} points to {out}; {np.mean(true == pred):.3f} correct")

# %% The point-only baseline swaps every MPVConv layer for a shared MLP and
# widens all layers until the parameter count matches.
budget = MPVCNN(mpv_cfg).num_parameters()
base_cfg = point_only_baseline(mpv_cfg, budget)
print("params:", budget, "vs", MPVCNN(base_cfg).num_parameters())
print("baseline layers:", [(s.kind, s.out_channels) for s in base_cfg.layer_specs], "head", base_cfg.head_channels)
baseline = build_mpvcnn(base_cfg, seed=0)
train(baseline, train_set, tcfg)
print(f"baseline val mIoU {evaluate(baseline, val_set).miou:.4f}")
# With a constant feature the baseline cannot tell one point from another:
# every point gets the same prediction.


# %% A fairer comparison gives both networks the normalized coordinates as
# per-point features, the usual input of a point network. Poses only rotate
# about the vertical axis, so a point's label is whether its own normalized
# height exceeds 0.5: a per-point network needs no neighbourhood context for
# this task, and the grid branches have nothing extra to offer it.
def with_coords(ds: Dataset) -> Dataset:
    clouds = [RawCloud(c.coords, normalize_coords(c).coords_hat.astype(np.float32), c.labels, c.num_classes)
              for c in ds.samples]
    return Dataset(clouds, ds.class_count)


xyz_train, xyz_val = with_coords(train_set), with_coords(val_set)
mpv_xyz = replace(mpv_cfg, in_channels=3)
base_xyz = point_only_baseline(mpv_xyz, MPVCNN(mpv_xyz).num_parameters())
for name, cfg in (("MPVCNN", mpv_xyz), ("point-only", base_xyz)):
    scores = []
    for seed in (0, 1, 2):
        net = build_mpvcnn(cfg, seed)
        train(net, xyz_train, replace(tcfg, seed=seed))
        scores.append(evaluate(net, xyz_val).miou)
    print(f"{name:10s} with xyz features: val mIoU per seed {np.round(scores, 4)}, median {np.median(scores):.4f}")
