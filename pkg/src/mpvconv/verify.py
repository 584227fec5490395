"""The gradient suite: finite-difference checks for every differentiable op
and for a small MPVConv layer in each combination mode.

Every check builds a float64 instance from a seed, contracts the op's output
with a fixed random unit-norm direction ``R`` and hands the closure
``sum(out * R)`` to :func:`finite_diff_check`. A plain sum would have zero
gradient through train-mode batch norm. The unit norm keeps ``|f|`` near 1,
so the roundoff floor of the central difference (about ``eps * |f| / h``)
stays well below the absolute error allowed for gradients that are exactly
zero, such as a conv bias feeding batch norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops, voxel
from .gradcheck import GradCheckReport, finite_diff_check
from .layer import COMBINATIONS, MPVConvConfig, MPVConvLayer
from .nn import Activation

H = 1e-5
TOL = 1e-4


@dataclass
class SuiteRow:
    name: str
    seed: int
    report: GradCheckReport

    def line(self) -> str:
        r = self.report
        status = "ok" if r.passed else "FAIL"
        where = "" if r.worst_coordinate is None else f"{r.worst_coordinate[0]}{list(r.worst_coordinate[1])}"
        extra = f"\t{r.failure}" if r.failure else ""
        return f"{self.name}\tseed={self.seed}\tmax_rel_err={r.max_relative_error:.3e}\tat={where}\t{status}{extra}"


def _direction(rng, shape):
    R = rng.standard_normal(shape)
    return R / np.linalg.norm(R)


def _away_from_zero(rng, shape, margin=0.1):
    # keeps activation inputs clear of the kink by far more than h
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def check_conv3d(seed: int, k: int = 3, samples: int | None = 12) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4, 4))
    w = ops.Parameter(rng.standard_normal((4, 3, k, k, k)))
    b = ops.Parameter(rng.standard_normal(4))
    R = _direction(rng, (2, 4, 4, 4, 4))

    def fn():
        w.zero_grad()
        b.zero_grad()
        out, cache = ops.conv3d_forward(x, w, b)
        dx = ops.conv3d_backward(R, cache)
        return float((out * R).sum()), {"x": dx, "weight": w.grad, "bias": b.grad}

    return finite_diff_check(fn, {"x": x, "weight": w.value, "bias": b.value}, H, TOL, samples, seed)


def check_pointwise_linear(seed: int, samples: int | None = None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7))
    w = ops.Parameter(rng.standard_normal((4, 3)))
    b = ops.Parameter(rng.standard_normal(4))
    R = _direction(rng, (2, 4, 7))

    def fn():
        w.zero_grad()
        b.zero_grad()
        out, cache = ops.pointwise_linear_forward(x, w, b)
        dx = ops.pointwise_linear_backward(R, cache)
        return float((out * R).sum()), {"x": dx, "weight": w.grad, "bias": b.grad}

    return finite_diff_check(fn, {"x": x, "weight": w.value, "bias": b.value}, H, TOL, samples, seed)


def check_batch_norm(seed: int, samples: int | None = None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 3, 5))
    state = ops.BatchNormState.create(3, np.float64)
    state.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
    state.beta.value[:] = rng.standard_normal(3)
    R = _direction(rng, x.shape)

    def fn():
        state.gamma.zero_grad()
        state.beta.zero_grad()
        out, cache = ops.batch_norm_forward(x, state, training=True)
        dx = ops.batch_norm_backward(R, cache)
        return float((out * R).sum()), {"x": dx, "gamma": state.gamma.grad, "beta": state.beta.grad}

    return finite_diff_check(
        fn, {"x": x, "gamma": state.gamma.value, "beta": state.beta.value}, H, TOL, samples, seed
    )


def check_activation(seed: int, kind: str) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, (3, 11))
    R = _direction(rng, x.shape)

    def fn():
        out, cache = ops.activation_forward(x, kind)
        return float((out * R).sum()), {"x": ops.activation_backward(R, cache)}

    return finite_diff_check(fn, {"x": x}, H, TOL, None, seed)


def check_voxelize(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    r = 4
    coords_r = rng.uniform(0, r - 1, size=(20, 3))
    coords_r[:6] = coords_r[6:12]  # force shared cells
    feats = rng.standard_normal((20, 3))
    R = _direction(rng, (3, r, r, r))

    def fn():
        grid = voxel.voxelize_avg(coords_r, feats, r)
        return float((grid.data * R).sum()), {"features": voxel.voxelize_avg_backward(R, grid)}

    return finite_diff_check(fn, {"features": feats}, H, TOL, None, seed)


def check_devoxelize(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    r = 4
    coords_r = rng.uniform(0, r - 1, size=(20, 3))
    data = rng.standard_normal((3, r, r, r))
    R = _direction(rng, (20, 3))

    def fn():
        out = voxel.devoxelize_trilinear(data, coords_r)
        return float((out * R).sum()), {"grid": voxel.devoxelize_trilinear_backward(R, coords_r, r)}

    return finite_diff_check(fn, {"grid": data}, H, TOL, None, seed)


def activation_signature(module) -> bytes:
    """Which side of zero every activation input fell on in the last forward."""
    parts = []
    for m in module.modules():
        if isinstance(m, Activation) and hasattr(m, "_cache"):
            inner = m._cache[1]
            x = inner if m.kind == "relu" else inner[0]
            parts.append(np.packbits(x > 0).tobytes())
    return b"|".join(parts)


def check_layer(seed: int, mode: str, param_samples: int = 2, feature_samples: int = 16) -> GradCheckReport:
    """Full layer, 16 points, C1 = C2 = 4, r = 4, train-mode batch norm."""
    rng = np.random.default_rng(seed)
    cfg = MPVConvConfig(4, 4, resolution=4, combination_mode=mode)
    layer = MPVConvLayer(cfg, np.float64).init_parameters(seed).train()
    for _, p in layer.named_parameters():
        # shift gammas/betas off their defaults so every path is exercised
        p.value += 0.1 * rng.standard_normal(p.value.shape)
    coords = rng.uniform(0, 1, size=(2, 16, 3))
    feats = rng.standard_normal((2, 4, 16))
    R = _direction(rng, (2, 4, 16))
    params = dict(layer.named_parameters())

    def fn():
        layer.zero_grad()
        out = layer.forward(coords, feats)
        dx = layer.backward(R)
        grads = {name: p.grad for name, p in params.items()}
        grads["features"] = dx
        return math.fsum((out * R).ravel()), grads

    inputs = {"features": feats}
    inputs.update({name: p.value for name, p in params.items()})
    rep = finite_diff_check(
        fn, inputs, H, TOL, None, seed,
        samples_per_input={"features": feature_samples, **{n: param_samples for n in params}},
        signature=lambda: activation_signature(layer),
    )
    return rep


def run_suite(seeds=(0, 1, 2, 3, 4), modes=tuple(COMBINATIONS)) -> list[SuiteRow]:
    rows = []
    for s in seeds:
        rows.append(SuiteRow("conv3d_k1", s, check_conv3d(s, k=1)))
        rows.append(SuiteRow("conv3d_k3", s, check_conv3d(s, k=3)))
        rows.append(SuiteRow("pointwise_linear", s, check_pointwise_linear(s)))
        rows.append(SuiteRow("batch_norm_train", s, check_batch_norm(s)))
        rows.append(SuiteRow("relu", s, check_activation(s, "relu")))
        rows.append(SuiteRow("leaky_relu", s, check_activation(s, "leaky_relu")))
        rows.append(SuiteRow("voxelize_avg", s, check_voxelize(s)))
        rows.append(SuiteRow("devoxelize_trilinear", s, check_devoxelize(s)))
    for mode in modes:
        for s in seeds:
            rows.append(SuiteRow(f"mpvconv_layer_{mode}", s, check_layer(s, mode)))
    return rows
