"""One-factor-at-a-time ablations around the default DAB configuration."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Optional

from ..attention import AttentionConfig
from .scenes import Scene
from .train import TrainConfig, evaluate, train
from .unet import PLACEMENTS, UNet

# half-resolution analogue of B=36, s=24 (same 3:2 ratio)
DEFAULT_ATTENTION = AttentionConfig(block_size=9, stride=6, layers=2)
AXES = ("placement", "layers", "block_size", "overlap")
CLASSES = (1, 2, 3, 4)


def overlap_stride(block: int) -> int:
    return math.ceil(block * 2 / 3)


@dataclass
class Setting:
    axis: str
    value: str
    placement: str
    cfg: Optional[AttentionConfig]


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def expand_axes(axes: dict, base: AttentionConfig = DEFAULT_ATTENTION,
                placement: str = "penultimate") -> list[Setting]:
    if not axes:
        raise ValueError("ablation needs at least one axis")
    settings = []
    for axis, values in axes.items():
        if axis not in AXES:
            raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
        for value in values:
            cfg, where = base, placement
            if axis == "placement":
                if value not in PLACEMENTS:
                    raise ValueError(f"unknown placement {value!r}")
                where = value
            elif axis == "layers":
                cfg = replace(base, layers=int(value))
            elif axis == "block_size":
                b = int(value)
                cfg = replace(base, block_size=b, stride=overlap_stride(b) if base.overlapping else b)
            else:
                b = base.block_size
                cfg = replace(base, stride=overlap_stride(b) if _parse_bool(value) else b)
            settings.append(Setting(axis, str(value), where, None if where == "none" else cfg))
    return settings


def ablation_rows(settings: list[Setting], train_scenes: list[Scene], test_scenes: list[Scene],
                  train_cfg: TrainConfig, log=None) -> list[dict]:
    """Train and evaluate one model per setting; every model uses ``train_cfg.seed``."""
    rows = []
    for st in settings:
        model = UNet(st.placement, st.cfg, seed=train_cfg.seed)
        result = train(model, replace(train_cfg, attention=st.cfg, placement=st.placement), train_scenes)
        report = evaluate(model, test_scenes)
        row = {"axis": st.axis, "value": st.value, "placement": st.placement,
               "B": st.cfg.block_size if st.cfg else "", "s": st.cfg.stride if st.cfg else "",
               "n": st.cfg.layers if st.cfg else "", "seed": train_cfg.seed,
               "final_loss": f"{result.losses[-1]:.6f}" if result.losses else ""}
        for k, mean, sd in zip(report.classes, report.mean, report.sd):
            row[f"dsc{k}_mean"] = f"{mean:.6f}"
            row[f"dsc{k}_sd"] = f"{sd:.6f}"
        row["ellipse_mean"] = f"{(report.class_mean(1) + report.class_mean(2)) / 2:.6f}"
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def ablation_run(axes: dict, train_scenes, test_scenes, train_cfg: TrainConfig = TrainConfig(),
                 base: AttentionConfig = DEFAULT_ATTENTION, log=None) -> str:
    return rows_to_csv(ablation_rows(expand_axes(axes, base), train_scenes, test_scenes, train_cfg, log))
