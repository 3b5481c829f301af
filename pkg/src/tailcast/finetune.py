"""Adapt a trained model to extreme samples with a frozen layer prefix.

Starting from the parameters a full training run produced, only the
extreme training windows are revisited; the first k dense layers stay
frozen to preserve what was learned from the bulk of the data, and the
remaining layers train under L2 regularization against overfitting the
small extreme pool. The run can never return a model that scores worse on
the extreme evaluation set than its starting point.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evaluate as evaluation
from . import mlp
from .dataio import Normalizer, SplitResult
from .errors import ConfigError, DataError
from .reweight import WeightVector
from .train import TrainConfig, TrainReport, fit

DEFAULT_FREEZE_SWEEP = (0, 2, 4, 6, 8)


@dataclass(frozen=True)
class FreezeSpec:
    """Fine-tuning knobs: frozen dense-layer prefix, L2, epoch budget.

    ``frozen_prefix`` counts parameterized (dense) layers from the input
    side; dropout layers carry no parameters and are not counted. With
    ``reuse_static_weights`` the caller's reweighting weights are applied
    to the extreme pool instead of uniform ones.
    """

    frozen_prefix: int
    l2: float = 1e-6
    max_epochs: int = 500
    reuse_static_weights: bool = False

    def __post_init__(self):
        if self.frozen_prefix < 0:
            raise ConfigError("frozen_prefix must be >= 0")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")


def freeze(params: mlp.ParamSet, frozen_prefix: int) -> np.ndarray:
    """Trainable mask with the first ``frozen_prefix`` dense layers frozen.

    Both the weight matrix and bias of a frozen layer are excluded from
    updates; everything after the prefix stays trainable.
    """
    if not 0 <= frozen_prefix <= params.layer_count:
        raise ConfigError(
            f"frozen_prefix must lie in [0, {params.layer_count}], got {frozen_prefix}"
        )
    mask = np.ones(params.n_params, dtype=bool)
    for layer, (w_sl, b_sl) in enumerate(params.layer_slices()):
        if layer < frozen_prefix:
            mask[w_sl] = False
            mask[b_sl] = False
    return mask


def finetune_run(
    params: mlp.ParamSet,
    split: SplitResult,
    freeze_spec: FreezeSpec,
    config: TrainConfig,
    static_weights: WeightVector | None = None,
) -> tuple[mlp.ParamSet, TrainReport]:
    """Retrain on extreme training windows only, under the freeze mask.

    Early stopping monitors the same extreme evaluation pool as the main
    run. If no epoch improves on the starting parameters, those are
    returned unchanged (reported as epoch 0), so the extreme-eval loss
    never gets worse.
    """
    if not any(w.extreme for w in split.train):
        raise DataError("no extreme training windows to fine-tune on")
    mask = freeze(params, freeze_spec.frozen_prefix)

    ft_config = replace(
        config,
        training_subset="extreme_only",
        max_epochs=freeze_spec.max_epochs,
        l2=freeze_spec.l2,
    )
    weights = static_weights if freeze_spec.reuse_static_weights else None
    if weights is None and ft_config.strategy in ("ipf", "evt"):
        ft_config = replace(ft_config, strategy="unweighted")

    best, report = fit(params, split, ft_config, static_weights=weights,
                       trainable_mask=mask)
    if report.best_eval_loss > report.baseline_eval_loss:
        best = params.copy()
        report.best_eval_loss = report.baseline_eval_loss
        report.best_epoch = 0
    return best, report


@dataclass(frozen=True)
class SweepRow:
    frozen_prefix: int
    mae: float
    rmse: float
    best_epoch: int
    eval_loss: float


def freeze_sweep(
    params: mlp.ParamSet,
    split: SplitResult,
    config: TrainConfig,
    normalizer: Normalizer,
    prefixes: Sequence[int] = DEFAULT_FREEZE_SWEEP,
    l2: float = 1e-6,
    max_epochs: int = 500,
) -> list[SweepRow]:
    """Fine-tune once per frozen-prefix value and score each result.

    Metrics are raw-unit MAE/RMSE on the extreme evaluation windows, which
    is also where the per-dataset optimum should be picked.
    """
    rows = []
    for k in prefixes:
        spec = FreezeSpec(frozen_prefix=int(k), l2=l2, max_epochs=max_epochs)
        tuned, report = finetune_run(params, split, spec, config)
        metrics = evaluation.score(tuned, split.eval_extreme, normalizer, subset="extreme")
        rows.append(SweepRow(
            frozen_prefix=int(k),
            mae=metrics.mae,
            rmse=metrics.rmse,
            best_epoch=report.best_epoch,
            eval_loss=report.best_eval_loss,
        ))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frozen_prefix", "mae", "rmse", "best_epoch", "eval_loss"])
        for r in rows:
            writer.writerow([r.frozen_prefix, repr(r.mae), repr(r.rmse),
                             r.best_epoch, repr(r.eval_loss)])
    return path


def select_best_prefix(rows: Sequence[SweepRow]) -> int:
    """Prefix with the lowest evaluation MAE (first on ties)."""
    if not rows:
        raise ConfigError("empty sweep")
    best = min(rows, key=lambda r: (r.mae, r.frozen_prefix))
    return best.frozen_prefix
