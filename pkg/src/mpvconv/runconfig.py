"""Flat ``key = value`` run configuration for the command-line tools.

One key per line, ``#`` starts a comment, blank lines are ignored. Every key
must appear in :data:`SCHEMA`; anything else is rejected with the key's
name and line. Omitted keys take the defaults below.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import Dataset, SyntheticSpec, generate_synthetic, load_dataset
from .model import LayerSpec, MPVCNNConfig
from .train import TrainConfig

DEFAULT_VARIANTS = "A,B,C,D,E,F,G,H,init_only,res_1.5x,conv3d_x3,no_1x1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # dataset: files when given, synthetic hemispheres otherwise
    train_data: str | None = None
    val_data: str | None = None
    n_train: int = 200
    n_val: int = 50
    points_per_cloud: int = 512
    noise_sigma: float = 0.02
    data_seed: int = 0
    # model
    num_classes: int = 2
    layers: str = "mpvconv:32:16,mpvconv:64:8,shared_mlp:128"
    global_feature: bool = True
    head_channels: str = "128"
    width_multiplier: float = 1.0
    combination_mode: str | None = None
    fusion_enabled: bool = True
    one_by_one_conv: bool = True
    init_conv_depth: int = 2
    fusion_conv_depth: int = 2
    resolution_scale: float = 1.0
    leaky_slope: float = 0.1
    # training
    batch_size: int = 8
    learning_rate: float = 0.001
    epochs: int = 50
    seed: int = 0
    loss: str = "cross_entropy"
    stop_val_miou: float | None = None
    stop_val_accuracy: float | None = None
    # ablation and benchmark
    ablate_variants: str = DEFAULT_VARIANTS
    bench_resolutions: str = "8,16"
    bench_repeats: int = 5
    bench_batch: int = 2
    bench_points: int = 512
    bench_channels: int = 32

    def layer_specs(self) -> tuple[LayerSpec, ...]:
        specs = []
        for i, item in enumerate(self.layers.split(",")):
            parts = item.strip().split(":")
            try:
                if parts[0] == "mpvconv" and len(parts) == 3:
                    specs.append(LayerSpec("mpvconv", int(parts[1]), int(parts[2])))
                elif parts[0] == "shared_mlp" and len(parts) == 2:
                    specs.append(LayerSpec("shared_mlp", int(parts[1])))
                else:
                    raise ValueError
            except ValueError:
                raise ConfigError(
                    f"layers entry {i} ({item.strip()!r}) must be mpvconv:<channels>:<resolution> "
                    f"or shared_mlp:<channels>"
                ) from None
        return tuple(specs)

    def model_config(self, in_channels: int) -> MPVCNNConfig:
        heads = tuple(int(c) for c in self.head_channels.split(",") if c.strip())
        return MPVCNNConfig(
            in_channels=in_channels,
            num_classes=self.num_classes,
            layer_specs=self.layer_specs(),
            global_feature=self.global_feature,
            head_channels=heads,
            width_multiplier=self.width_multiplier,
            combination_mode=self.combination_mode,
            fusion_enabled=self.fusion_enabled,
            one_by_one_conv=self.one_by_one_conv,
            init_conv_depth=self.init_conv_depth,
            fusion_conv_depth=self.fusion_conv_depth,
            resolution_scale=self.resolution_scale,
            leaky_slope=self.leaky_slope,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.epochs, self.seed, self.loss)

    def datasets(self) -> tuple[Dataset, Dataset]:
        """Training and validation sets. Synthetic sets use ``data_seed`` and
        ``data_seed + 1`` so they never share a cloud."""
        if self.train_data is not None:
            train = load_dataset(self.train_data)
        else:
            train = generate_synthetic(
                SyntheticSpec(self.n_train, self.points_per_cloud, self.noise_sigma), self.data_seed
            )
        if self.val_data is not None:
            val = load_dataset(self.val_data)
        else:
            val = generate_synthetic(
                SyntheticSpec(self.n_val, self.points_per_cloud, self.noise_sigma), self.data_seed + 1
            )
        if train.class_count > self.num_classes or val.class_count > self.num_classes:
            raise ConfigError(
                f"num_classes={self.num_classes} but the data has up to "
                f"{max(train.class_count, val.class_count)} classes"
            )
        return train, val

    def variants(self) -> list[str]:
        return [v.strip() for v in self.ablate_variants.split(",") if v.strip()]

    def resolutions(self) -> list[int]:
        return [int(v) for v in self.bench_resolutions.split(",") if v.strip()]


SCHEMA = {f.name: f for f in fields(RunConfig)}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, raw: str, lineno: int, source):
    kind = SCHEMA[name].type
    optional = "None" in kind
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("bool"):
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{source}:{lineno}: bad value for {name}: {exc}") from None


def parse_config(text: str, source="<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _convert(key, raw, lineno, source)
    cfg = RunConfig(**values)
    # surface model/training validation errors at load time
    cfg.layer_specs()
    cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), source=path)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
