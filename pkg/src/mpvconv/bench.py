"""Wall-time and peak-memory measurements for the kernels and one layer.

Times are the median of ``repeats`` runs. Peak memory comes from a separate
run under ``tracemalloc`` (numpy reports its buffers to it), so tracing does
not slow the timed runs.
"""

from __future__ import annotations

import statistics
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import ops, voxel
from .layer import MPVConvConfig, MPVConvLayer


@dataclass
class BenchRow:
    name: str
    resolution: int
    median_seconds: float
    peak_bytes: int


def _measure(fn, repeats):
    fn()  # warm-up (numba compilation, allocator)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    tracemalloc.start()
    try:
        fn()
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return statistics.median(times), peak


def bench_cases(r: int, batch: int = 2, points: int = 512, channels: int = 32, seed: int = 0):
    """``(name, closure)`` pairs for one voxel resolution, float32."""
    rng = np.random.default_rng(seed)
    coords_hat = rng.uniform(0, 1, (batch, points, 3))
    coords_r = voxel.scale_coords(coords_hat, r)
    feats = rng.standard_normal((batch, channels, points)).astype(np.float32)
    grid = rng.standard_normal((batch, channels, r, r, r)).astype(np.float32)
    w3 = ops.Parameter(rng.standard_normal((channels, channels, 3, 3, 3)).astype(np.float32) * 0.05)
    b3 = ops.Parameter(np.zeros(channels, np.float32))
    w1 = ops.Parameter(rng.standard_normal((channels, channels)).astype(np.float32))
    b1 = ops.Parameter(np.zeros(channels, np.float32))
    bn = ops.BatchNormState.create(channels, np.float32)
    layer = MPVConvLayer(MPVConvConfig(channels, channels, resolution=r)).init_parameters(seed).eval()
    return [
        ("voxelize", lambda: voxel.voxelize_batch(coords_r, feats, r)),
        ("devoxelize", lambda: voxel.devoxelize_batch(grid, coords_r)),
        ("conv3d", lambda: ops.conv3d_forward(grid, w3, b3)),
        ("pointwise_linear", lambda: ops.pointwise_linear_forward(feats, w1, b1)),
        ("batch_norm", lambda: ops.batch_norm_forward(grid, bn, training=True)),
        ("layer", lambda: layer.forward(coords_hat, feats)),
    ]


def run_bench(resolutions=(8, 16), repeats=5, batch=2, points=512, channels=32) -> list[BenchRow]:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for r in resolutions:
        for name, fn in bench_cases(r, batch, points, channels):
            t, peak = _measure(fn, repeats)
            rows.append(BenchRow(name, r, t, peak))
    return rows


def format_bench(rows: list[BenchRow], repeats: int) -> str:
    out = [f"# median of {repeats} runs; peak memory from one traced run", "op\tresolution\tmedian_ms\tpeak_kib"]
    for row in rows:
        out.append(f"{row.name}\t{row.resolution}\t{row.median_seconds * 1e3:.3f}\t{row.peak_bytes / 1024:.1f}")
    return "\n".join(out) + "\n"
