"""Stateful building blocks on top of :mod:`mpvconv.ops`.

A :class:`Module` keeps the cache of its most recent ``forward`` so that the
following ``backward`` call can consume it. Parameters and batch-norm
running statistics are discovered by walking attributes in definition
order, which also fixes their names.
"""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import ops, voxel
from .ops import BatchNormState, Parameter


class Module:
    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter, BatchNormState)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            elif isinstance(child, BatchNormState):
                yield f"{full}.gamma", child.gamma
                yield f"{full}.beta", child.beta
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_batchnorms(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, BatchNormState):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_batchnorms(full + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        for _, bn in self.named_batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def init_parameters(self, seed: int) -> "Module":
        """Deterministic initialization keyed on ``(seed, parameter name)``.

        Weights get fan-in scaled uniform values, biases and shifts zero,
        scales one. Because each parameter draws from its own stream, adding
        or removing a sub-module leaves every other parameter unchanged.
        """
        for name, p in self.named_parameters():
            p.name = name
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "weight":
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                p.value = ops.fan_in_uniform(p.value.shape, rng, p.value.dtype)
            elif leaf == "gamma":
                p.value = np.ones_like(p.value)
            else:
                p.value = np.zeros_like(p.value)
            p.zero_grad()
        return self


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, dtype=np.float32):
        if kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {kernel_size}")
        k = kernel_size
        self.weight = Parameter(np.zeros((out_channels, in_channels, k, k, k), dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype))

    def forward(self, x):
        out, self._cache = ops.conv3d_forward(x, self.weight, self.bias)
        return out

    def backward(self, dout):
        return ops.conv3d_backward(dout, self._cache)


class PointwiseLinear(Module):
    def __init__(self, in_channels, out_channels, dtype=np.float32):
        self.weight = Parameter(np.zeros((out_channels, in_channels), dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype))

    def forward(self, x):
        out, self._cache = ops.pointwise_linear_forward(x, self.weight, self.bias)
        return out

    def backward(self, dout):
        return ops.pointwise_linear_backward(dout, self._cache)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.state = BatchNormState.create(channels, dtype)

    def forward(self, x):
        out, self._cache = ops.batch_norm_forward(x, self.state, self.training)
        return out

    def backward(self, dout):
        return ops.batch_norm_backward(dout, self._cache)


class Activation(Module):
    def __init__(self, kind="relu", slope=ops.DEFAULT_LEAKY_SLOPE):
        self.kind = kind
        self.slope = slope

    def forward(self, x):
        out, self._cache = ops.activation_forward(x, self.kind, self.slope)
        return out

    def backward(self, dout):
        return ops.activation_backward(dout, self._cache)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def conv_block(in_channels, out_channels, kernel_size=3, slope=ops.DEFAULT_LEAKY_SLOPE, dtype=np.float32):
    """conv3d -> 3D batch norm -> leaky ReLU."""
    return Sequential(
        Conv3d(in_channels, out_channels, kernel_size, dtype),
        BatchNorm(out_channels, dtype),
        Activation("leaky_relu", slope),
    )


def shared_mlp(in_channels, out_channels, dtype=np.float32):
    """Kernel-1 1D convolution -> 1D batch norm -> ReLU, shared by all points."""
    return Sequential(
        PointwiseLinear(in_channels, out_channels, dtype),
        BatchNorm(out_channels, dtype),
        Activation("relu"),
    )


class VoxelBranch(Module):
    """voxelize -> stack of conv blocks -> trilinear devoxelize.

    Takes scaled coordinates ``[B, N, 3]`` and point features ``[B, C, N]``;
    returns devoxelized features ``[B, Cout, N]``.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        resolution,
        depth=2,
        one_by_one=False,
        slope=ops.DEFAULT_LEAKY_SLOPE,
        dtype=np.float32,
    ):
        if depth < 1:
            raise ValueError(f"voxel branch needs at least one 3x3x3 conv, got depth={depth}")
        self.resolution = resolution
        blocks = []
        c = in_channels
        if one_by_one:
            blocks.append(conv_block(c, out_channels, 1, slope, dtype))
            c = out_channels
        for _ in range(depth):
            blocks.append(conv_block(c, out_channels, 3, slope, dtype))
            c = out_channels
        self.convs = Sequential(*blocks)

    def forward(self, coords_r, features):
        grid, self.counts, self._vox_cache = voxel.voxelize_batch(
            coords_r, features, self.resolution
        )
        grid = self.convs.forward(grid)
        out, self._devox_cache = voxel.devoxelize_batch(grid, coords_r)
        return out

    def backward(self, dout):
        dgrid = voxel.devoxelize_batch_backward(dout, self._devox_cache)
        dgrid = self.convs.backward(dgrid)
        return voxel.voxelize_batch_backward(dgrid, self._vox_cache)
