"""Ablation suite and one-axis hyper-parameter sweeps, emitted as CSV tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ConfigError, TrainConfig
from .training import Dataset, train

# row order follows the published ablation table
ABLATIONS: tuple[tuple[str, dict], ...] = (
    ("w/o CL", {"no_curriculum": True}),
    ("w/o Task1", {"no_task1": True}),
    ("w/o Task2", {"no_task2": True}),
    ("w/o Task3", {"no_task3": True}),
    ("STEP", {}),
)

SWEEP_AXES = {"prefix_length": ("model", "prefix_conv"), "query_length": ("model", "num_queries")}


@dataclass
class ResultRow:
    label: str
    recall: dict  # mean over seeds
    per_seed: list  # one recall dict per seed


def _mean_recall(per_seed: list[dict]) -> dict:
    keys = per_seed[0].keys() if per_seed else ()
    return {k: float(np.mean([r[k] for r in per_seed])) for k in keys}


def _run_seeds(cfg: TrainConfig, dataset: Dataset, seeds: Sequence[int]) -> list[dict]:
    out = []
    for s in seeds:
        c = cfg.copy()
        c.seed = int(s)
        _, report = train(c, dataset)
        out.append(dict(report.recall))
    return out


def run_ablation_suite(cfg: TrainConfig, dataset: Dataset, seeds: Sequence[int] = (0,)) -> list[ResultRow]:
    """Train and evaluate the full model and its four ablations on paired seeds."""
    rows = []
    for label, flags in ABLATIONS:
        c = cfg.copy()
        for k, v in vars(c.ablation).items():
            setattr(c.ablation, k, flags.get(k, False))
        per_seed = _run_seeds(c, dataset, seeds)
        rows.append(ResultRow(label, _mean_recall(per_seed), per_seed))
    return rows


def hyperparam_sweep(cfg: TrainConfig, dataset: Dataset, axis: str, values: Sequence[int],
                     seeds: Sequence[int] = (0,)) -> list[ResultRow]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    section, field_ = SWEEP_AXES[axis]
    rows = []
    for v in values:
        c = cfg.copy()
        setattr(getattr(c, section), field_, int(v))
        # the prefix axis moves both heads together
        if axis == "prefix_length":
            c.model.prefix_rec = int(v)
        c.validate()
        per_seed = _run_seeds(c, dataset, seeds)
        rows.append(ResultRow(str(v), _mean_recall(per_seed), per_seed))
    return rows


def rows_to_csv(rows: list[ResultRow], first_column: str, ks: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([first_column] + [f"recall@{k}" for k in ks])
    for r in rows:
        w.writerow([r.label] + [f"{r.recall[f'recall@{k}']:.6f}" for k in ks])
    return buf.getvalue()


def ablation_csv(rows: list[ResultRow]) -> str:
    return rows_to_csv(rows, "model", (1, 10, 50))


def sweep_csv(rows: list[ResultRow], axis: str) -> str:
    return rows_to_csv(rows, axis, (1, 50))
