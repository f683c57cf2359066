"""Train-then-evaluate sweeps over the number of negatives."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .bounds import CSV_COLUMNS, BoundReport, evaluate_bounds
from .toytrain import TrainConfig, TrainResult, generate_synthetic, train_encoder


@dataclass
class SweepRun:
    seed: int
    k_plus_1: int
    train: TrainResult
    report: BoundReport


def run_one(
    config: TrainConfig, k_plus_1: int, eval_temperature: float = 1.0, n_batches: int | None = None
) -> SweepRun:
    """Train with K = k_plus_1 - 1 negatives and evaluate the bounds at the same K."""
    cfg = config.replace(k_negatives=k_plus_1 - 1)
    data = generate_synthetic(cfg)
    result = train_encoder(cfg, data)
    report = evaluate_bounds(
        result.val_set,
        result.train_set,
        cfg.embedding_augmentation,
        k_plus_1 - 1,
        t=eval_temperature,
        n_batches=n_batches,
        seed=cfg.seed,
        m_aug=cfg.m_augmentations,
        accuracies=(result.mean_acc, result.probe_acc),
    )
    return SweepRun(cfg.seed, k_plus_1, result, report)


def run_sweep(
    config: TrainConfig,
    k_plus_1_values,
    seeds=None,
    eval_temperature: float = 1.0,
    n_batches: int | None = None,
) -> list[SweepRun]:
    seeds = [config.seed] if seeds is None else list(seeds)
    return [
        run_one(config.replace(seed=s), kp1, eval_temperature, n_batches) for s in seeds for kp1 in k_plus_1_values
    ]


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(float(v))
    return str(v)


def reports_to_csv(reports, extra_columns: dict | None = None) -> str:
    """CSV text with the report columns; ``extra_columns`` maps name to per-row values, prepended."""
    extra_columns = extra_columns or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(extra_columns) + list(CSV_COLUMNS))
    for i, rep in enumerate(reports):
        row = rep.csv_row()
        w.writerow([format_value(v[i]) for v in extra_columns.values()] + [format_value(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()
