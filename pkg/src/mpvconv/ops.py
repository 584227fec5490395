"""Dense numeric primitives with hand-written vector-Jacobian products.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache, returns the gradient with
respect to the input and accumulates parameter gradients into
``Parameter.grad``. Arrays are plain ``numpy.ndarray`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

DEFAULT_LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(eq=False)
class Parameter:
    """A trainable array together with its accumulated gradient."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(
                f"parameter {self.name!r}: grad shape {self.grad.shape} "
                f"!= value shape {self.value.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)


@dataclass(eq=False)
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn"):
        return cls(
            gamma=Parameter(np.ones(channels, dtype), f"{name}.gamma"),
            beta=Parameter(np.zeros(channels, dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self):
        return self.gamma.value.shape[0]


def fan_in_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform init in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``; fan_in is the
    product of all axes but the first."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------


def _check_conv3d(x, weight, bias, padding):
    if x.ndim != 5:
        raise ValueError(f"conv3d expects input [B,Ci,D,H,W], got shape {x.shape}")
    w = weight.value
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ValueError(f"conv3d expects cubic weight [Co,Ci,k,k,k], got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"conv3d kernel size must be odd, got k={k}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects Ci={w.shape[1]}"
        )
    if bias.value.shape != (w.shape[0],):
        raise ValueError(f"conv3d bias shape {bias.value.shape} != ({w.shape[0]},)")
    p = (k - 1) // 2
    if padding is not None and padding != p:
        raise ValueError(
            f"conv3d keeps spatial extent: padding must be {p} for k={k}, got {padding}"
        )
    return k, p


def conv3d_forward(x: np.ndarray, weight: Parameter, bias: Parameter, padding=None):
    """Stride-1 same-size 3D cross-correlation with zero padding.

    Each sample's padded volume is laid out channels-last and flattened to
    rows; a kernel tap is then a constant row offset, so the convolution is
    one GEMM per tap on contiguous views. Taps are summed in row-major
    (dz, dy, dx) order and every sample gets identically shaped GEMMs, so a
    sample's output does not depend on its position in the batch.
    """
    k, p = _check_conv3d(x, weight, bias, padding)
    B, Ci, D, H, W = x.shape
    Co = weight.value.shape[0]
    Dp, Hp, Wp = D + 2 * p, H + 2 * p, W + 2 * p

    padded = np.zeros((B, Dp, Hp, Wp, Ci), dtype=x.dtype)
    padded[:, p : p + D, p : p + H, p : p + W] = x.transpose(0, 2, 3, 4, 1)
    rows = padded.reshape(B, -1, Ci)
    L = rows.shape[1] - (k - 1) * (Hp * Wp + Wp + 1)

    out = np.zeros((B, rows.shape[1], Co), dtype=x.dtype)
    tmp = np.empty((B, L, Co), dtype=x.dtype)
    w = weight.value
    for a in range(k):
        for b in range(k):
            for c in range(k):
                off = (a * Hp + b) * Wp + c
                np.matmul(rows[:, off : off + L], np.ascontiguousarray(w[:, :, a, b, c].T), out=tmp)
                out[:, :L] += tmp
    out = out.reshape(B, Dp, Hp, Wp, Co)[:, :D, :H, :W].transpose(0, 4, 1, 2, 3)
    out = out + bias.value[:, None, None, None]
    cache = (rows, (B, Ci, D, H, W), k, weight, bias)
    return np.ascontiguousarray(out), cache


def conv3d_backward(dout: np.ndarray, cache) -> np.ndarray:
    rows, (B, Ci, D, H, W), k, weight, bias = cache
    p = (k - 1) // 2
    Co = weight.value.shape[0]
    Dp, Hp, Wp = D + 2 * p, H + 2 * p, W + 2 * p
    L = rows.shape[1] - (k - 1) * (Hp * Wp + Wp + 1)

    g = np.zeros((B, Dp, Hp, Wp, Co), dtype=dout.dtype)
    g[:, :D, :H, :W] = dout.transpose(0, 2, 3, 4, 1)
    g = g.reshape(B, -1, Co)[:, :L]
    gT = np.ascontiguousarray(g.transpose(0, 2, 1))

    w = weight.value
    dw = np.empty_like(w)
    dx_rows = np.zeros((B, rows.shape[1], Ci), dtype=dout.dtype)
    tmp = np.empty((B, L, Ci), dtype=dout.dtype)
    tmp_w = np.empty((B, Co, Ci), dtype=dout.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                off = (a * Hp + b) * Wp + c
                np.matmul(gT, rows[:, off : off + L], out=tmp_w)
                dw[:, :, a, b, c] = tmp_w.sum(axis=0)
                np.matmul(g, np.ascontiguousarray(w[:, :, a, b, c]), out=tmp)
                dx_rows[:, off : off + L] += tmp
    weight.grad += dw
    bias.grad += dout.sum(axis=(0, 2, 3, 4))

    dx = dx_rows.reshape(B, Dp, Hp, Wp, Ci)[:, p : p + D, p : p + H, p : p + W]
    return np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3))


# ---------------------------------------------------------------------------
# pointwise (shared) linear
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _pointwise_accumulate(w, x, b, out):
    # each output element sums its Ci products in ascending channel order;
    # vectorization runs along the point axis only, so no reassociation
    B, Ci, N = x.shape
    for bb in range(B):
        for o in range(w.shape[0]):
            row = out[bb, o]
            for n in range(N):
                row[n] = b[o]
            for i in range(Ci):
                wi = w[o, i]
                xr = x[bb, i]
                for n in range(N):
                    row[n] += wi * xr[n]


def pointwise_linear_forward(x: np.ndarray, weight: Parameter, bias: Parameter):
    """Apply the same ``[Co, Ci]`` matrix at every point of ``x [B, Ci, N]``.

    The sum over input channels is accumulated in a fixed order rather than
    through GEMM, so every point goes through an identical sequence of
    roundings and the result is exactly equivariant under any permutation of
    the point axis.
    """
    if x.ndim != 3:
        raise ValueError(f"pointwise_linear expects input [B,Ci,N], got shape {x.shape}")
    w = weight.value
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ValueError(
            f"pointwise_linear channel mismatch: input has {x.shape[1]} channels, "
            f"weight has shape {w.shape}"
        )
    if bias.value.shape != (w.shape[0],):
        raise ValueError(f"pointwise_linear bias shape {bias.value.shape} != ({w.shape[0]},)")
    dt = np.result_type(x, w)
    out = np.empty((x.shape[0], w.shape[0], x.shape[2]), dtype=dt)
    _pointwise_accumulate(
        np.ascontiguousarray(w, dtype=dt),
        np.ascontiguousarray(x, dtype=dt),
        np.ascontiguousarray(bias.value, dtype=dt),
        out,
    )
    return out, (x, weight, bias)


def pointwise_linear_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, weight, bias = cache
    weight.grad += np.einsum("bon,bin->oi", dout, x, optimize=True)
    bias.grad += dout.sum(axis=(0, 2))
    return np.matmul(weight.value.T, dout)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def batch_norm_forward(x: np.ndarray, state: BatchNormState, training: bool):
    """Per-channel normalization over every axis except axis 1.

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ValueError(
            f"batch_norm expects [B,{state.channels},...], got shape {x.shape}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    if training:
        if count < 2:
            raise ValueError(
                "batch_norm in training mode needs at least 2 elements per channel"
            )
        mean = x.mean(axis=axes)
        centered = x - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(
            state.running_mean.dtype
        )
        state.running_var = (
            (1 - m) * state.running_var + m * var * (count / (count - 1))
        ).astype(state.running_var.dtype)
    else:
        mean = state.running_mean
        var = state.running_var
        centered = x - mean.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * state.gamma.value.reshape(bshape) + state.beta.value.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, state, training)


def batch_norm_backward(dout: np.ndarray, cache) -> np.ndarray:
    xhat, inv_std, state, training = cache
    axes = (0,) + tuple(range(2, dout.ndim))
    bshape = (1, -1) + (1,) * (dout.ndim - 2)
    state.gamma.grad += (dout * xhat).sum(axis=axes)
    state.beta.grad += dout.sum(axis=axes)
    dxhat = dout * state.gamma.value.reshape(bshape)
    if not training:
        return dxhat * inv_std.reshape(bshape)
    # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    mean_d = dxhat.mean(axis=axes).reshape(bshape)
    mean_dx = (dxhat * xhat).mean(axis=axes).reshape(bshape)
    return inv_std.reshape(bshape) * (dxhat - mean_d - xhat * mean_dx)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    # subgradient 0 at exactly x == 0
    return dout * (cache > 0)


def leaky_relu_forward(x: np.ndarray, slope: float = DEFAULT_LEAKY_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    return np.where(x > 0, x, x * slope).astype(x.dtype, copy=False), (x, slope)


def leaky_relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, slope = cache
    # slope at exactly x == 0
    return np.where(x > 0, dout, dout * slope).astype(dout.dtype, copy=False)


def activation_forward(x, kind: str = "relu", slope: float = DEFAULT_LEAKY_SLOPE):
    if kind == "relu":
        out, cache = relu_forward(x)
    elif kind == "leaky_relu":
        out, cache = leaky_relu_forward(x, slope)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out, (kind, cache)


def activation_backward(dout, cache):
    kind, inner = cache
    if kind == "relu":
        return relu_backward(dout, inner)
    return leaky_relu_backward(dout, inner)
