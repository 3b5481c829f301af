"""Score trained models in raw units and export hidden embeddings.

Predictions are denormalized before any metric is computed, so MAE and
RMSE carry the target's original units. Metrics aggregate over every
(window, horizon step, target) triple of the chosen subset, with
per-horizon-step and per-target breakdowns alongside.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mlp
from .dataio import Normalizer, WindowSample, stack_windows
from .errors import ConfigError, EmptySubsetError

SUBSETS = ("extreme", "normal", "all")


@dataclass(frozen=True)
class MetricsReport:
    """Raw-unit errors of one subset, with step and target breakdowns."""

    subset: str
    n_windows: int
    n_values: int
    mae: float
    rmse: float
    per_step_mae: tuple[float, ...]
    per_step_rmse: tuple[float, ...]
    per_target_mae: tuple[float, ...]
    per_target_rmse: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "subset": self.subset,
            "n_windows": self.n_windows,
            "n_values": self.n_values,
            "mae": self.mae,
            "rmse": self.rmse,
            "per_step_mae": list(self.per_step_mae),
            "per_step_rmse": list(self.per_step_rmse),
            "per_target_mae": list(self.per_target_mae),
            "per_target_rmse": list(self.per_target_rmse),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _select(windows: Sequence[WindowSample], subset: str) -> list[WindowSample]:
    if subset == "all":
        return list(windows)
    if subset == "extreme":
        return [w for w in windows if w.extreme]
    if subset == "normal":
        return [w for w in windows if not w.extreme]
    raise ConfigError(f"subset must be one of {SUBSETS}, got {subset!r}")


def score(
    params: mlp.ParamSet,
    windows: Sequence[WindowSample],
    normalizer: Normalizer,
    subset: str = "extreme",
) -> MetricsReport:
    """MAE and RMSE of the model on one labeled subset, in raw units."""
    chosen = _select(windows, subset)
    if not chosen:
        raise EmptySubsetError(f"subset {subset!r} contains no windows")
    x, y = stack_windows(chosen)
    y_hat = mlp.forward(params, x).y_hat

    horizon = chosen[0].horizon
    n_targets = chosen[0].y.shape[1]
    pred_raw = normalizer.inverse_targets(y_hat.reshape(-1, horizon, n_targets))
    true_raw = normalizer.inverse_targets(y.reshape(-1, horizon, n_targets))
    err = pred_raw - true_raw

    abs_err = np.abs(err)
    sq_err = err * err
    return MetricsReport(
        subset=subset,
        n_windows=len(chosen),
        n_values=err.size,
        mae=float(abs_err.mean()),
        rmse=float(np.sqrt(sq_err.mean())),
        per_step_mae=tuple(float(v) for v in abs_err.mean(axis=(0, 2))),
        per_step_rmse=tuple(float(v) for v in np.sqrt(sq_err.mean(axis=(0, 2)))),
        per_target_mae=tuple(float(v) for v in abs_err.mean(axis=(0, 1))),
        per_target_rmse=tuple(float(v) for v in np.sqrt(sq_err.mean(axis=(0, 1)))),
    )


def export_embeddings(
    params: mlp.ParamSet,
    windows: Sequence[WindowSample],
    n_extreme: int = 50,
    n_normal: int = 50,
    seed: int = 0,
    path: str | Path | None = None,
) -> list[tuple]:
    """Sample windows per class and export last-hidden-layer embeddings.

    Rows are (origin, class label, one column per embedding unit); when a
    class has fewer windows than requested the sample truncates with a
    warning. Identical seeds give identical files.
    """
    if n_extreme < 0 or n_normal < 0:
        raise ConfigError("sample counts must be >= 0")
    rng = np.random.default_rng(seed)
    rows: list[tuple] = []
    for label, count in (("extreme", n_extreme), ("normal", n_normal)):
        pool = [w for w in windows if w.extreme == (label == "extreme")]
        if count > len(pool):
            warnings.warn(
                f"requested {count} {label} windows but only {len(pool)} exist; truncating"
            )
            count = len(pool)
        if count == 0:
            continue
        picked = sorted(rng.choice(len(pool), size=count, replace=False).tolist())
        chosen = [pool[i] for i in picked]
        x, _ = stack_windows(chosen)
        emb = mlp.hidden_embeddings(params, x)
        for w, e in zip(chosen, emb):
            rows.append((w.origin, label, *(float(v) for v in e)))

    if path is not None:
        width = params.spec.hidden_widths[-1]
        header = ["origin", "label", *(f"e{i:02d}" for i in range(width))]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([row[0], row[1], *(repr(v) for v in row[2:])])
    return rows
