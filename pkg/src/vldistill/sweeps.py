"""Ablation grids over the distillation stage.

Each axis maps a grid value to a ``(DistillConfig, TrainConfig)`` pair; a
sweep runs every (value, seed) cell from scratch and evaluates it on a held
out corpus. Cells share nothing mutable, so they may run in worker processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .harness import TrainConfig, attention_distance, distill_pretrain, evaluate
from .losses import DistillConfig
from .tokens import ConfigError, Record

__all__ = ["AXES", "LOSS_ABLATION_ROWS", "STRATEGY_ROWS", "SweepRow", "default_grid", "cell_configs",
           "run_cell", "run_sweep", "summarise"]

AXES = ("queue_size", "loss_ablation", "data_fraction", "epochs", "strategy")

# (VLP, ATT, HID) rows of the loss ablation
LOSS_ABLATION_ROWS = {
    "vlp": dict(vlp_weight=1.0, alpha=0.0, beta=0.0),
    "vlp+att": dict(vlp_weight=1.0, alpha=10.0, beta=0.0),
    "vlp+hid": dict(vlp_weight=1.0, alpha=0.0, beta=10.0),
    "att+hid": dict(vlp_weight=0.0, alpha=10.0, beta=10.0),
    "all": dict(vlp_weight=1.0, alpha=10.0, beta=10.0),
}

STRATEGY_ROWS = {
    "vlp": dict(alpha=0.0, beta=0.0),
    "textual": dict(token_scope="textual_only"),
    "mse_layerwise": dict(hid_variant="mse_layerwise", att_scope="layerwise"),
    "mse_lastlayer_meanpool": dict(hid_variant="mse_meanpool"),
    "mse_lastlayer": dict(hid_variant="mse_lastlayer"),
    "nce_lastlayer_meanpool": dict(hid_variant="nce_meanpool"),
    "nce_lastlayer": dict(hid_variant="nce_token"),
}

_DEFAULT_GRIDS = {
    "queue_size": [1, 64, 128, 512, 1024, 4096],
    "loss_ablation": list(LOSS_ABLATION_ROWS),
    "data_fraction": [0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
    "epochs": [1, 5, 10, 20, 50, 100],
    "strategy": list(STRATEGY_ROWS),
}


def default_grid(axis: str) -> list:
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    return list(_DEFAULT_GRIDS[axis])


def cell_configs(axis: str, value, distill: DistillConfig, train: TrainConfig):
    """Apply one grid value on top of the base configs."""
    if axis == "queue_size":
        return distill.with_(queue_size=int(value)), train
    if axis == "loss_ablation":
        if value not in LOSS_ABLATION_ROWS:
            raise ConfigError(f"unknown loss_ablation row {value!r}")
        return distill.with_(**LOSS_ABLATION_ROWS[value]), train
    if axis == "data_fraction":
        return distill, train.with_(data_fraction=float(value))
    if axis == "epochs":
        return distill, train.with_(epochs=float(value))
    if axis == "strategy":
        if value not in STRATEGY_ROWS:
            raise ConfigError(f"unknown strategy row {value!r}")
        return distill.with_(**STRATEGY_ROWS[value]), train
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: object
    seed: int
    steps: int
    masked_token_accuracy: float
    attention_distance: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def run_cell(args) -> SweepRow:
    axis, value, seed, teacher, corpus, eval_corpus, distill, train = args
    d, t = cell_configs(axis, value, distill, train.with_(seed=seed))
    ckpt = distill_pretrain(teacher, None, corpus, d, t)
    acc = evaluate(ckpt, eval_corpus)["masked_token_accuracy"]
    dist = attention_distance(ckpt, teacher, eval_corpus)
    return SweepRow(axis, value, seed, ckpt.step, acc, dist)


def run_sweep(axis: str, teacher: Checkpoint, corpus: Sequence[Record], eval_corpus: Sequence[Record],
              distill: DistillConfig, train: TrainConfig, grid: Sequence | None = None,
              seeds: Sequence[int] = (0,), workers: int = 1) -> list[SweepRow]:
    """Run every (grid value, seed) cell; rows come back in grid-major order."""
    grid = default_grid(axis) if grid is None else list(grid)
    for v in grid:                       # fail fast on bad cells
        cell_configs(axis, v, distill, train)
    jobs = [(axis, v, s, teacher, corpus, eval_corpus, distill, train) for v in grid for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_cell, jobs))
    return [run_cell(j) for j in jobs]


def summarise(rows: Sequence[SweepRow]) -> list[dict]:
    """One row per grid value: mean and std over seeds."""
    out, order = {}, []
    for r in rows:
        key = str(r.value)
        if key not in out:
            out[key] = []
            order.append((key, r.value))
        out[key].append(r)
    table = []
    for key, value in order:
        acc = np.array([r.masked_token_accuracy for r in out[key]])
        dist = np.array([r.attention_distance for r in out[key]])
        table.append({
            "axis": out[key][0].axis,
            "value": value,
            "seeds": len(acc),
            "masked_token_accuracy": float(acc.mean()),
            "masked_token_accuracy_std": float(acc.std()),
            "attention_distance": float(dist.mean()),
        })
    return table
