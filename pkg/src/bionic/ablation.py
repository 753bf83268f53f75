"""The ablation grid: named variants as overrides of the full configuration."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

from .metrics import format_pm
from .model import BioNicConfig
from .trainer import ExperimentResult, TrainConfig


@dataclass(frozen=True)
class Variant:
    name: str
    model: Dict[str, object] = field(default_factory=dict)
    train: Dict[str, object] = field(default_factory=dict)
    baseline: bool = False

    def configs(self, model_cfg: BioNicConfig, train_cfg: TrainConfig) -> Tuple[BioNicConfig, TrainConfig]:
        if self.baseline:
            shape = {k: getattr(model_cfg, k) for k in ("layer_sizes", "image_size", "conv1_channels",
                                                        "conv2_channels", "n_classes")}
            m = BioNicConfig.baseline(**shape)
        else:
            m = dataclasses.replace(model_cfg, **self.model)
        return m, _replace_nested(train_cfg, self.train)


def _replace_nested(cfg, overrides: Dict[str, object]):
    """``dataclasses.replace`` that accepts dotted keys such as ``scheduler.enabled``."""
    top: Dict[str, object] = {}
    nested: Dict[str, Dict[str, object]] = {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            top[key] = value
    for head, sub in nested.items():
        top[head] = _replace_nested(getattr(cfg, head), sub)
    return dataclasses.replace(cfg, **top) if top else cfg


GRID: List[Variant] = [
    Variant("standard_cnn", baseline=True),
    Variant("full"),
    Variant("abl_weight_decay", train={"weight_decay": 0.0}),
    Variant("abl_synaptic_noise", model={"use_synaptic_noise": False}),
    Variant("abl_inhibition", model={"use_graded_inhibition": False}),
    Variant("abl_lateral_inhibition", model={"use_lateral_inhibition": False}),
    Variant("abl_attention", model={"use_attention": False}),
    Variant("abl_intra_layer", model={"use_intra_layer": False}),
    Variant("abl_connectivity_masks", model={"use_masks": False}),
    Variant("abl_lr_scheduler", train={"scheduler.enabled": False}),
    Variant("abl_label_smoothing", train={"smoothing": 0.0}),
    Variant("abl_layer_norm", model={"use_layer_norm": False}),
    Variant("abl_conv_layers", model={"use_conv_stem": False}),
    Variant("abl_data_augmentation", train={"augmentation.enabled": False}),
]
VARIANTS: Dict[str, Variant] = {v.name: v for v in GRID}

# `--ablate <component>` on the train command
COMPONENTS = {v.name[len("abl_"):]: v.name for v in GRID if v.name.startswith("abl_")}


def _flatten(obj, prefix: str = "") -> Dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = v
    return out


def config_diff(a: Tuple[BioNicConfig, TrainConfig], b: Tuple[BioNicConfig, TrainConfig]) -> List[str]:
    fa = {**_flatten(a[0], "model."), **_flatten(a[1], "train.")}
    fb = {**_flatten(b[0], "model."), **_flatten(b[1], "train.")}
    return sorted(k for k in fa if fa[k] != fb[k] and not k.startswith("train.seeds"))


def validate_grid(grid: Sequence[Variant] = GRID, model_cfg: BioNicConfig = None, train_cfg: TrainConfig = None) -> None:
    """Every non-baseline variant must differ from ``full`` in exactly one setting."""
    model_cfg = model_cfg or BioNicConfig()
    train_cfg = train_cfg or TrainConfig()
    names = [v.name for v in grid]
    if len(set(names)) != len(names) or "full" not in names:
        raise ValueError("ablation grid needs unique names including 'full'")
    full = {v.name: v for v in grid}["full"].configs(model_cfg, train_cfg)
    for v in grid:
        if v.baseline or v.name == "full":
            continue
        diff = config_diff(full, v.configs(model_cfg, train_cfg))
        if len(diff) != 1:
            raise ValueError(f"variant {v.name} differs from full in {len(diff)} settings {diff}, expected exactly 1")


validate_grid()


TABLE_HEADER = ("variant", "test_acc", "test_loss", "train_acc", "train_loss", "f1_macro", "parameters", "seeds")


def table_rows(results: Iterable[ExperimentResult]) -> List[List[str]]:
    """Rows sorted by descending mean test accuracy, ties in grid order; accuracies in percent."""
    order = {v.name: i for i, v in enumerate(GRID)}
    rows = []
    for res in sorted(results, key=lambda r: (-r.summary["test_acc"][0], order.get(r.variant, len(order)), r.variant)):
        s = res.summary
        pct = lambda k: format_pm(100 * s[k][0], 100 * s[k][1])
        rows.append([res.variant, pct("test_acc"), format_pm(*s["test_loss"], digits=4), pct("train_acc"),
                     format_pm(*s["train_loss"], digits=4), format_pm(*s["f1_macro"], digits=4),
                     str(res.parameters), str(len(res.records))])
    return rows


def write_table(results: Iterable[ExperimentResult], path) -> List[List[str]]:
    rows = table_rows(results)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(rows)
    return rows
