"""MPVCNN: a PointNet-style segmentation network whose per-point layers are
MPVConv layers.

Backbone layers run in order on ``[B, C, N]`` features. With
``global_feature`` the max over points of the last backbone output is
concatenated back onto every point before the head MLPs and the final
pointwise classifier.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ops
from .layer import MPVConvConfig, MPVConvLayer, scaled_channels
from .nn import Module, PointwiseLinear, shared_mlp
from .transform import RawCloud, normalize_coords


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "mpvconv" or "shared_mlp"
    out_channels: int
    resolution: int | None = None


DEFAULT_LAYERS = (
    LayerSpec("mpvconv", 32, 16),
    LayerSpec("mpvconv", 64, 8),
    LayerSpec("shared_mlp", 128),
)


@dataclass(frozen=True)
class MPVCNNConfig:
    in_channels: int = 1
    num_classes: int = 2
    layer_specs: tuple[LayerSpec, ...] = DEFAULT_LAYERS
    global_feature: bool = True
    head_channels: tuple[int, ...] = (128,)
    width_multiplier: float = 1.0
    combination_mode: str | None = None
    fusion_enabled: bool = True
    one_by_one_conv: bool = True
    init_conv_depth: int = 2
    fusion_conv_depth: int = 2
    resolution_scale: float = 1.0
    leaky_slope: float = ops.DEFAULT_LEAKY_SLOPE
    # the point-only comparison baseline has no MPVConv layer at all
    allow_point_only: bool = False

    def __post_init__(self):
        specs = tuple(s if isinstance(s, LayerSpec) else LayerSpec(*s) for s in self.layer_specs)
        object.__setattr__(self, "layer_specs", specs)
        object.__setattr__(self, "head_channels", tuple(self.head_channels))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if not specs:
            raise ValueError("layer_specs must not be empty")
        for i, s in enumerate(specs):
            if s.kind not in ("mpvconv", "shared_mlp"):
                raise ValueError(f"layer {i}: unknown kind {s.kind!r}")
            if s.out_channels < 1:
                raise ValueError(f"layer {i}: out_channels must be >= 1")
            if s.kind == "mpvconv" and (s.resolution is None or s.resolution < 2):
                raise ValueError(f"layer {i}: mpvconv needs a resolution >= 2")
        if not self.allow_point_only and not any(s.kind == "mpvconv" for s in specs):
            raise ValueError("at least one layer must be an mpvconv layer")
        # validates mode/fusion/width combinations up front
        self.mpvconv_configs()

    def mpvconv_configs(self) -> list[MPVConvConfig | None]:
        out, c = [], self.in_channels
        for s in self.layer_specs:
            if s.kind == "mpvconv":
                cfg = MPVConvConfig(
                    in_channels=c,
                    out_channels=s.out_channels,
                    resolution=max(2, int(round(s.resolution * self.resolution_scale))),
                    width_multiplier=self.width_multiplier,
                    combination_mode=self.combination_mode,
                    fusion_enabled=self.fusion_enabled,
                    one_by_one_conv=self.one_by_one_conv,
                    init_conv_depth=self.init_conv_depth,
                    fusion_conv_depth=self.fusion_conv_depth,
                    leaky_slope=self.leaky_slope,
                )
                out.append(cfg)
                c = cfg.effective_out_channels
            else:
                out.append(None)
                c = scaled_channels(s.out_channels, self.width_multiplier)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_specs"] = [list(asdict(s).values()) for s in self.layer_specs]
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MPVCNNConfig":
        d = dict(d)
        d["layer_specs"] = tuple(LayerSpec(*s) for s in d["layer_specs"])
        d["head_channels"] = tuple(d["head_channels"])
        return cls(**d)

    def point_only(self) -> "MPVCNNConfig":
        """Same layout with every mpvconv layer replaced by a shared MLP."""
        specs = tuple(
            LayerSpec("shared_mlp", s.out_channels) if s.kind == "mpvconv" else s
            for s in self.layer_specs
        )
        return replace(self, layer_specs=specs, allow_point_only=True)


class MPVCNN(Module):
    def __init__(self, config: MPVCNNConfig, dtype=np.float32):
        self.config = config
        self.backbone = []
        c = config.in_channels
        for spec, mcfg in zip(config.layer_specs, config.mpvconv_configs()):
            if mcfg is not None:
                layer = MPVConvLayer(mcfg, dtype)
                c_out = mcfg.effective_out_channels
            else:
                c_out = scaled_channels(spec.out_channels, config.width_multiplier)
                layer = shared_mlp(c, c_out, dtype)
            self.backbone.append(layer)
            c = c_out
        if config.global_feature:
            c *= 2
        self.head = []
        for width in config.head_channels:
            w = scaled_channels(width, config.width_multiplier)
            self.head.append(shared_mlp(c, w, dtype))
            c = w
        self.classifier = PointwiseLinear(c, config.num_classes, dtype)

    @property
    def dtype(self):
        return self.classifier.weight.value.dtype

    def forward(self, coords_hat: np.ndarray, features: np.ndarray) -> np.ndarray:
        """``coords_hat [B, N, 3]`` in the unit cube and ``features [B, C1, N]``
        to logits ``[B, K, N]``."""
        if features.ndim != 3 or features.shape[1] != self.config.in_channels:
            raise ValueError(
                f"model expects features [B,{self.config.in_channels},N], got {features.shape}"
            )
        x = features.astype(self.dtype, copy=False)
        for layer in self.backbone:
            x = layer.forward(coords_hat, x) if isinstance(layer, MPVConvLayer) else layer.forward(x)
        if self.config.global_feature:
            self._argmax = x.argmax(axis=2)
            pooled = np.take_along_axis(x, self._argmax[:, :, None], axis=2)
            x = np.concatenate([x, np.broadcast_to(pooled, x.shape)], axis=1)
        for layer in self.head:
            x = layer.forward(x)
        return self.classifier.forward(x)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = self.classifier.backward(dlogits)
        for layer in reversed(self.head):
            d = layer.backward(d)
        if self.config.global_feature:
            c = d.shape[1] // 2
            dlocal = d[:, :c].copy()
            dglobal = d[:, c:].sum(axis=2)
            np.put_along_axis(
                dlocal,
                self._argmax[:, :, None],
                np.take_along_axis(dlocal, self._argmax[:, :, None], axis=2) + dglobal[:, :, None],
                axis=2,
            )
            d = dlocal
        for layer in reversed(self.backbone):
            d = layer.backward(d)
        return d


def build_mpvcnn(config: MPVCNNConfig, seed: int, dtype=np.float32) -> MPVCNN:
    return MPVCNN(config, dtype).init_parameters(seed)


def prepare_batch(clouds, dtype=np.float32):
    """Normalize a list of equally sized clouds into model inputs
    ``(coords_hat [B,N,3], features [B,C1,N])``."""
    sizes = {c.num_points for c in clouds}
    if len(sizes) != 1:
        raise ValueError(f"clouds in one batch must have equal point counts, got {sorted(sizes)}")
    normed = [normalize_coords(c) for c in clouds]
    coords = np.stack([n.coords_hat for n in normed])
    feats = np.stack([np.asarray(c.features, dtype=dtype).T for c in clouds])
    return coords, feats


def forward(model: MPVCNN, cloud: RawCloud, mode: str = "eval") -> np.ndarray:
    """Per-point logits ``[N, K]`` for one cloud."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if cloud.num_features != model.config.in_channels:
        raise ValueError(
            f"cloud has {cloud.num_features} feature channels, model expects {model.config.in_channels}"
        )
    model.train(mode == "train")
    coords, feats = prepare_batch([cloud], model.dtype)
    return model.forward(coords, feats)[0].T


def argmax_labels(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the smaller class id
    return np.argmax(logits, axis=axis)


def predict(model: MPVCNN, cloud: RawCloud) -> np.ndarray:
    return argmax_labels(forward(model, cloud, "eval"))


def predict_batch(model: MPVCNN, clouds, batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode predictions for many clouds, batching equal-sized runs."""
    model.eval()
    preds = []
    i = 0
    while i < len(clouds):
        j = i + 1
        while j < len(clouds) and j - i < batch_size and clouds[j].num_points == clouds[i].num_points:
            j += 1
        coords, feats = prepare_batch(clouds[i:j], model.dtype)
        logits = model.forward(coords, feats)
        preds.extend(argmax_labels(logits, axis=1))
        i = j
    return preds


def point_only_baseline(config: MPVCNNConfig, target_params: int) -> MPVCNNConfig:
    """The layout of ``config`` with every mpvconv layer replaced by a shared
    MLP, all hidden widths scaled by a common factor chosen so the
    parameter count comes as close as possible to ``target_params``."""
    base = config.point_only()

    def scaled(alpha):
        specs = tuple(replace(s, out_channels=max(1, round(s.out_channels * alpha))) for s in base.layer_specs)
        heads = tuple(max(1, round(c * alpha)) for c in base.head_channels)
        return replace(base, layer_specs=specs, head_channels=heads)

    def count(cfg):
        return MPVCNN(cfg).num_parameters()

    lo, hi = 0.05, 1.0
    while count(scaled(hi)) < target_params:
        hi *= 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if count(scaled(mid)) < target_params:
            lo = mid
        else:
            hi = mid
    return min((scaled(lo), scaled(hi)), key=lambda c: abs(count(c) - target_params))
