"""The multi point-voxel convolution layer.

An initialization stage runs a voxel branch (average voxelization, 3x3x3
convolutions, trilinear devoxelization) and a shared-MLP point branch side
by side, producing ``V1`` and ``P1``. A fusion stage feeds ``V1 + P1`` into a
second pair of branches, whose voxel side starts with an optional 1x1x1
convolution, producing ``V2`` and ``P2``. The layer output is the sum of a
selectable subset of the four.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .nn import Module, VoxelBranch, shared_mlp
from .voxel import scale_coords

COMBINATIONS = {
    "A": ("V2",),
    "B": ("V1", "P1"),
    "C": ("P1", "V2"),
    "D": ("V2", "P2"),
    "E": ("V1", "P1", "V2"),
    "F": ("P1", "V2", "P2"),
    "G": ("V1", "V2", "P2"),
    "H": ("V1", "P1", "V2", "P2"),
}

WIDTH_MULTIPLIERS = (0.125, 0.25, 0.5, 1.0)


def scaled_channels(channels: int, multiplier: float) -> int:
    """``round(channels * multiplier)`` with halves rounded up, at least 1."""
    return max(1, int(math.floor(channels * multiplier + 0.5)))


@dataclass(frozen=True)
class MPVConvConfig:
    in_channels: int
    out_channels: int
    resolution: int = 16
    width_multiplier: float = 1.0
    combination_mode: str | None = None
    fusion_enabled: bool = True
    one_by_one_conv: bool = True
    init_conv_depth: int = 2
    fusion_conv_depth: int = 2
    leaky_slope: float = ops.DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        # Without a fusion stage only V1 and P1 exist, so the mode defaults to B.
        if self.combination_mode is None:
            object.__setattr__(self, "combination_mode", "G" if self.fusion_enabled else "B")
        if self.combination_mode not in COMBINATIONS:
            raise ValueError(
                f"combination_mode must be one of {sorted(COMBINATIONS)}, got {self.combination_mode!r}"
            )
        if not self.fusion_enabled and self.combination_mode != "B":
            raise ValueError(
                f"combination mode {self.combination_mode} uses V2/P2 and needs the fusion stage"
            )
        if self.width_multiplier not in WIDTH_MULTIPLIERS:
            raise ValueError(
                f"width_multiplier must be one of {WIDTH_MULTIPLIERS}, got {self.width_multiplier}"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise ValueError(f"resolution must be an integer >= 2, got {self.resolution}")
        if self.init_conv_depth < 1 or self.fusion_conv_depth < 1:
            raise ValueError("conv depths must be >= 1")

    @property
    def effective_out_channels(self) -> int:
        return scaled_channels(self.out_channels, self.width_multiplier)

    def with_resolution_scale(self, factor: float) -> "MPVConvConfig":
        return replace(self, resolution=max(2, int(round(self.resolution * factor))))


def combine_features(mode: str, V1=None, P1=None, V2=None, P2=None) -> np.ndarray:
    """Sum the components named by combination ``mode``, in V1, P1, V2, P2 order."""
    if mode not in COMBINATIONS:
        raise ValueError(f"unknown combination mode {mode!r}")
    parts = {"V1": V1, "P1": P1, "V2": V2, "P2": P2}
    missing = [k for k in COMBINATIONS[mode] if parts[k] is None]
    if missing:
        raise ValueError(f"mode {mode} needs {', '.join(missing)}, which were not provided")
    names = COMBINATIONS[mode]
    out = parts[names[0]].copy()
    for k in names[1:]:
        out += parts[k]
    return out


class MPVConvLayer(Module):
    """Point features ``[B, C1, N]`` at unit-cube coordinates ``[B, N, 3]``
    to ``[B, C2', N]``, where ``C2'`` is the width-scaled output count."""

    def __init__(self, config: MPVConvConfig, dtype=np.float32):
        self.config = config
        c1, c2 = config.in_channels, config.effective_out_channels
        self.init_voxel = VoxelBranch(
            c1, c2, config.resolution, config.init_conv_depth, False, config.leaky_slope, dtype
        )
        self.init_point = shared_mlp(c1, c2, dtype)
        if config.fusion_enabled:
            self.fusion_voxel = VoxelBranch(
                c2, c2, config.resolution, config.fusion_conv_depth,
                config.one_by_one_conv, config.leaky_slope, dtype,
            )
            self.fusion_point = shared_mlp(c2, c2, dtype)

    @property
    def out_channels(self) -> int:
        return self.config.effective_out_channels

    def _scaled(self, coords_hat):
        if coords_hat.ndim != 3 or coords_hat.shape[2] != 3:
            raise ValueError(f"coords_hat must be [B,N,3], got {coords_hat.shape}")
        return scale_coords(coords_hat, self.config.resolution)

    def init_module_forward(self, coords_hat, features):
        if features.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {features.shape[1]}"
            )
        coords_r = self._scaled(coords_hat)
        V1 = self.init_voxel.forward(coords_r, features)
        P1 = self.init_point.forward(features)
        return V1, P1

    def fusion_module_forward(self, coords_hat, V1, P1):
        if not self.config.fusion_enabled:
            raise ValueError("this layer was built without a fusion stage")
        if V1.shape != P1.shape:
            raise ValueError(f"V1 {V1.shape} and P1 {P1.shape} differ in shape")
        fused = V1 + P1
        V2 = self.fusion_voxel.forward(self._scaled(coords_hat), fused)
        P2 = self.fusion_point.forward(fused)
        return V2, P2

    def _uses_fusion(self):
        used = COMBINATIONS[self.config.combination_mode]
        return "V2" in used or "P2" in used

    def forward(self, coords_hat, features):
        V1, P1 = self.init_module_forward(coords_hat, features)
        V2 = P2 = None
        if self._uses_fusion():
            V2, P2 = self.fusion_module_forward(coords_hat, V1, P1)
        self._shape = V1.shape
        return combine_features(self.config.combination_mode, V1, P1, V2, P2)

    def backward(self, dout):
        used = COMBINATIONS[self.config.combination_mode]
        zero = np.zeros(self._shape, dtype=dout.dtype)
        dV1 = dout if "V1" in used else zero
        dP1 = dout if "P1" in used else zero
        if self._uses_fusion():
            dfused = self.fusion_voxel.backward(dout if "V2" in used else zero)
            dfused = dfused + self.fusion_point.backward(dout if "P2" in used else zero)
            dV1 = dV1 + dfused
            dP1 = dP1 + dfused
        return self.init_voxel.backward(dV1) + self.init_point.backward(dP1)
