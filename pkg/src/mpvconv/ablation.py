"""Desk-scale ablation over the layer's configuration space.

Each variant is a modification of one base model configuration; every
variant is trained with the same seed, data and epoch budget, then scored on
the validation set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import Dataset
from .layer import COMBINATIONS
from .model import MPVCNNConfig, build_mpvcnn
from .train import TrainConfig, evaluate, train

# full-scale ShapeNet Part mIoU reported for each design variant; shown as a
# point of reference only, desk-scale numbers are not expected to match
FULL_SCALE_REFERENCE = {
    "A": 85.39,
    "B": 85.50,
    "C": 85.43,
    "D": 85.58,
    "E": 85.46,
    "F": 85.54,
    "G": 85.76,
    "H": 85.57,
    "init_only": 85.50,
    "res_1.5x": 85.55,
    "conv3d_x3": 85.33,
    "no_1x1": 85.72,
}

DESCRIPTIONS = {
    "init_only": "initialization module only (no fusion)",
    "res_1.5x": "initialization module only, 1.5x voxel resolution",
    "conv3d_x3": "initialization module only, three 3x3x3 convs",
    "no_1x1": "full layer (mode G) without the 1x1x1 conv",
}


def variant_config(base: MPVCNNConfig, name: str) -> MPVCNNConfig:
    if name in COMBINATIONS:
        return replace(base, combination_mode=name, fusion_enabled=True)
    if name == "init_only":
        return replace(base, combination_mode=None, fusion_enabled=False)
    if name == "res_1.5x":
        return replace(base, combination_mode=None, fusion_enabled=False, resolution_scale=1.5)
    if name == "conv3d_x3":
        return replace(base, combination_mode=None, fusion_enabled=False, init_conv_depth=3)
    if name == "no_1x1":
        return replace(base, combination_mode="G", fusion_enabled=True, one_by_one_conv=False)
    raise ValueError(f"unknown ablation variant {name!r}; known: {sorted(FULL_SCALE_REFERENCE)}")


def describe(name: str) -> str:
    if name in COMBINATIONS:
        return "mode " + name + " = " + "+".join(COMBINATIONS[name])
    return DESCRIPTIONS[name]


@dataclass
class AblationRow:
    variant: str
    description: str
    num_parameters: int
    epochs: int
    val_miou: float
    val_macc: float
    reference: float | None


def run_ablation(
    base: MPVCNNConfig, variants, tcfg: TrainConfig, train_set: Dataset, val_set: Dataset
) -> list[AblationRow]:
    configs = [variant_config(base, v) for v in variants]  # reject bad names before training
    rows = []
    for name, cfg in zip(variants, configs):
        model = build_mpvcnn(cfg, tcfg.seed)
        result = train(model, train_set, tcfg)
        rep = evaluate(model, val_set, tcfg.batch_size)
        rows.append(
            AblationRow(
                name, describe(name), model.num_parameters(), result.epoch,
                rep.miou, rep.macc, FULL_SCALE_REFERENCE.get(name),
            )
        )
    return rows


def format_table(rows: list[AblationRow]) -> str:
    out = [
        "# full_scale_ref: ShapeNet Part mIoU (%) reported for the same design at full scale.",
        "# It is a reference point, not an expectation for this desk-scale run.",
        "variant\tdescription\tparams\tepochs\tval_miou\tval_macc\tfull_scale_ref",
    ]
    for r in rows:
        ref = "-" if r.reference is None else f"{r.reference:.2f}"
        out.append(
            f"{r.variant}\t{r.description}\t{r.num_parameters}\t{r.epochs}\t"
            f"{r.val_miou:.6f}\t{r.val_macc:.6f}\t{ref}"
        )
    return "\n".join(out) + "\n"
