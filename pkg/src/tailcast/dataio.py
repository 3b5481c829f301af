"""Ingest hourly time series, normalize, window, label extremes, and split.

The pipeline is: ``load_csv`` -> ``fit_normalizer`` -> ``make_windows`` ->
``label_extremes`` -> ``chrono_split``. Rows containing non-finite values
are dropped at ingestion and the series is re-segmented at the resulting
gaps, so no window ever spans a missing row. Splits are chronological and
windows that would straddle a split boundary are dropped, so train and
test never overlap in raw time.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateFeatureError,
    DimensionError,
    IntegrityError,
    SchemaError,
)

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
DEFAULT_PERCENTILE = 95.0

_HOUR_TOL = 1e-9


@dataclass(frozen=True)
class CsvSchema:
    """Column names expected in an input CSV."""

    timestamp_column: str
    feature_columns: tuple[str, ...]
    target_columns: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "target_columns", tuple(self.target_columns))
        missing = [c for c in self.target_columns if c not in self.feature_columns]
        if missing:
            raise SchemaError(f"target columns must be among the features: {missing}")
        if not self.target_columns:
            raise SchemaError("need at least one target column")


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Hour-spaced multivariate series with designated target columns.

    ``timestamps`` are epoch-hours. Consecutive rows are normally one hour
    apart; a larger whole-hour jump marks a segment boundary (e.g. where
    bad rows were dropped) across which no window may be built.
    """

    timestamps: np.ndarray
    values: np.ndarray
    feature_names: tuple[str, ...]
    target_indices: tuple[int, ...]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "target_indices", tuple(int(i) for i in self.target_indices))

        if vals.ndim != 2 or ts.ndim != 1 or ts.size != vals.shape[0]:
            raise DimensionError("values must be (N, d) with one timestamp per row")
        if len(self.feature_names) != vals.shape[1]:
            raise SchemaError("feature_names must match the value columns")
        if not self.target_indices or not all(0 <= i < vals.shape[1] for i in self.target_indices):
            raise SchemaError(f"target_indices out of range: {self.target_indices}")
        if not np.all(np.isfinite(vals)):
            raise IntegrityError("frame contains non-finite values after ingestion")
        deltas = np.diff(ts)
        if np.any(deltas <= 0):
            row = int(np.argmax(deltas <= 0)) + 1
            raise IntegrityError(f"timestamps not strictly increasing at row {row}")
        off_grid = np.abs(deltas - np.round(deltas)) > _HOUR_TOL
        if np.any(off_grid):
            row = int(np.argmax(off_grid)) + 1
            raise IntegrityError(f"timestamp spacing is not a whole number of hours at row {row}")
        ts.setflags(write=False)
        vals.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature column: {name!r}") from None

    def segments(self) -> list[tuple[int, int]]:
        """Half-open (start, stop) row ranges of consecutive hourly data."""
        if self.n_rows == 0:
            return []
        gaps = np.where(np.diff(self.timestamps) > 1.0 + _HOUR_TOL)[0]
        starts = np.concatenate([[0], gaps + 1])
        stops = np.concatenate([gaps + 1, [self.n_rows]])
        return [(int(a), int(b)) for a, b in zip(starts, stops)]


@dataclass(frozen=True)
class Normalizer:
    """Per-feature max-min scaling fit on the training segment only."""

    mins: np.ndarray
    maxs: np.ndarray
    target_indices: tuple[int, ...]

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=np.float64)
        maxs = np.asarray(self.maxs, dtype=np.float64)
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "target_indices", tuple(self.target_indices))
        if np.any(maxs <= mins):
            raise DegenerateFeatureError("every feature needs max > min")

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mins) / (self.maxs - self.mins)

    def inverse_transform(self, scaled: np.ndarray) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * (self.maxs - self.mins) + self.mins

    def inverse_targets(self, scaled: np.ndarray) -> np.ndarray:
        """Map normalized target columns back to raw units."""
        idx = list(self.target_indices)
        return np.asarray(scaled, dtype=np.float64) * (self.maxs[idx] - self.mins[idx]) + self.mins[idx]


@dataclass(frozen=True)
class WindowSample:
    """One (look-back, prediction) pair cut from a contiguous segment.

    ``x`` is the normalized look-back block (alpha, d); ``y`` the
    normalized prediction-window targets (beta, d*); ``origin`` the raw
    row index of the first look-back time point.
    """

    x: np.ndarray
    y: np.ndarray
    origin: int
    extreme: bool = False

    @property
    def lookback(self) -> int:
        return self.x.shape[0]

    @property
    def horizon(self) -> int:
        return self.y.shape[0]

    @property
    def end(self) -> int:
        """Exclusive raw row index just past the prediction window."""
        return self.origin + self.lookback + self.horizon


@dataclass(frozen=True)
class SplitResult:
    """Chronological train/validation/test windows plus the extreme-only
    evaluation pool drawn from validation."""

    train: tuple[WindowSample, ...]
    validation: tuple[WindowSample, ...]
    test: tuple[WindowSample, ...]
    eval_extreme: tuple[WindowSample, ...]
    boundaries: tuple[int, int]

    def summary(self) -> dict:
        def _count(ws):
            return {"total": len(ws), "extreme": sum(w.extreme for w in ws)}
        return {
            "train": _count(self.train),
            "validation": _count(self.validation),
            "test": _count(self.test),
            "eval_extreme": {"total": len(self.eval_extreme)},
            "boundaries": list(self.boundaries),
        }


def _parse_timestamp(cell: str, row: int) -> float:
    """Epoch-hours from an epoch-seconds number or an ISO-8601 string."""
    text = cell.strip()
    try:
        return float(text) / 3600.0
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise IntegrityError(f"unparseable timestamp {cell!r} at row {row}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp() / 3600.0


def _parse_cell(cell: str, column: str, row: int) -> float:
    text = cell.strip() if cell is not None else ""
    if text == "" or text.lower() in ("na", "nan", "null"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IntegrityError(
            f"unparseable numeric cell {cell!r} in column {column!r} at row {row}"
        ) from None


def load_csv(path: str | Path, schema: CsvSchema) -> TimeSeriesFrame:
    """Read a CSV with a header row into a TimeSeriesFrame.

    Rows with any non-finite value are dropped (the frame re-segments at
    the gaps). Duplicate or decreasing timestamps and unparseable numeric
    cells are integrity errors; row indices in messages count data rows
    from zero.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema.timestamp_column, *schema.feature_columns]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"CSV {path.name} is missing columns: {missing}")

        times: list[float] = []
        rows: list[list[float]] = []
        for i, record in enumerate(reader):
            times.append(_parse_timestamp(record[schema.timestamp_column], i))
            rows.append([_parse_cell(record[c], c, i) for c in schema.feature_columns])

    if not rows:
        raise DataError(f"CSV {path.name} contains no data rows")
    ts = np.asarray(times)
    vals = np.asarray(rows)
    deltas = np.diff(ts)
    if np.any(deltas <= 0):
        row = int(np.argmax(deltas <= 0)) + 1
        kind = "repeated" if abs(deltas[row - 1]) <= _HOUR_TOL else "decreasing"
        raise IntegrityError(f"{kind} timestamp at row {row}")

    finite = np.all(np.isfinite(vals), axis=1)
    dropped = int((~finite).sum())
    frame = TimeSeriesFrame(
        timestamps=ts[finite],
        values=vals[finite],
        feature_names=schema.feature_columns,
        target_indices=tuple(schema.feature_columns.index(c) for c in schema.target_columns),
    )
    logger.info(
        "loaded %s: %d rows (%d dropped), %d features, %d targets, %d segments",
        path.name, frame.n_rows, dropped, frame.n_features,
        len(frame.target_indices), len(frame.segments()),
    )
    return frame


def fit_normalizer(frame: TimeSeriesFrame, train_fraction: float) -> Normalizer:
    """Per-feature min/max over the leading training rows only."""
    if not 0.0 < train_fraction <= 1.0:
        raise DimensionError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    n_train = int(math.floor(train_fraction * frame.n_rows))
    if n_train < 2:
        raise DataError("training segment too short to fit a normalizer")
    seg = frame.values[:n_train]
    mins = seg.min(axis=0)
    maxs = seg.max(axis=0)
    flat = np.where(maxs <= mins)[0]
    if flat.size:
        names = [frame.feature_names[i] for i in flat]
        raise DegenerateFeatureError(f"constant feature(s) in training segment: {names}")
    return Normalizer(mins=mins, maxs=maxs, target_indices=frame.target_indices)


def make_windows(
    frame: TimeSeriesFrame,
    normalizer: Normalizer,
    lookback: int,
    horizon: int,
) -> list[WindowSample]:
    """Slide (lookback, horizon) windows over every contiguous segment.

    Each segment of length L contributes exactly L - lookback - horizon + 1
    windows; segments too short contribute none. Inputs hold all features,
    targets only the target columns, both max-min normalized.
    """
    if lookback < 1 or horizon < 1:
        raise DimensionError("lookback and horizon must both be >= 1")
    if lookback + horizon > frame.n_rows:
        raise DimensionError(
            f"lookback+horizon={lookback + horizon} exceeds the series length {frame.n_rows}"
        )
    scaled = normalizer.transform(frame.values)
    t_idx = list(frame.target_indices)
    windows: list[WindowSample] = []
    for start, stop in frame.segments():
        count = (stop - start) - lookback - horizon + 1
        for i in range(start, start + max(count, 0)):
            x = scaled[i : i + lookback]
            y = scaled[i + lookback : i + lookback + horizon][:, t_idx]
            windows.append(WindowSample(x=x, y=y, origin=i))
    if not windows:
        warnings.warn("no segment is long enough for the requested window sizes")
    return windows


def training_row_count(n_rows: int, fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS) -> int:
    """Rows belonging to the leading (training) split."""
    return int(math.floor(fractions[0] * n_rows))


def label_extremes(
    windows: Sequence[WindowSample],
    frame: TimeSeriesFrame,
    mode: str = "target",
    percentile: float = DEFAULT_PERCENTILE,
    train_end: int | None = None,
) -> tuple[list[WindowSample], np.ndarray]:
    """Flag windows whose aggregate crosses the training-set percentile.

    mode "target": a window is extreme when the raw maximum of any target
    variable over its prediction window strictly exceeds that variable's
    threshold. mode "covariate:<name>": the aggregate is the raw maximum
    of the named covariate over the look-back window instead.

    Thresholds are percentiles of the raw training rows (the leading
    ``train_end`` rows; defaults to the 70% split), so relabeling never
    leaks information from validation or test. Returns the relabeled
    windows and the per-variable threshold array.
    """
    if not 0.0 < percentile < 100.0:
        raise DimensionError(f"percentile must lie in (0, 100), got {percentile}")
    if train_end is None:
        train_end = training_row_count(frame.n_rows)
    if not 0 < train_end <= frame.n_rows:
        raise DimensionError(f"train_end out of range: {train_end}")

    if mode == "target":
        var_idx = list(frame.target_indices)
    elif mode.startswith("covariate:"):
        var_idx = [frame.feature_index(mode.split(":", 1)[1])]
    else:
        raise SchemaError(f"unknown labeling mode: {mode!r}")

    thresholds = np.percentile(frame.values[:train_end][:, var_idx], percentile, axis=0)

    labeled = []
    for w in windows:
        if mode == "target":
            block = frame.values[w.origin + w.lookback : w.end][:, var_idx]
        else:
            block = frame.values[w.origin : w.origin + w.lookback][:, var_idx]
        extreme = bool(np.any(block.max(axis=0) > thresholds))
        labeled.append(replace(w, extreme=extreme))
    return labeled, thresholds


def window_aggregates(
    windows: Sequence[WindowSample],
    frame: TimeSeriesFrame,
    mode: str = "target",
) -> np.ndarray:
    """Per-window scalar used for binning and tail weighting.

    mode "target": raw max of the first target variable over the
    prediction window. mode "covariate:<name>": raw max of that covariate
    over the look-back window.
    """
    if mode == "target":
        col = frame.target_indices[0]
        return np.array([
            frame.values[w.origin + w.lookback : w.end, col].max() for w in windows
        ])
    if mode.startswith("covariate:"):
        col = frame.feature_index(mode.split(":", 1)[1])
        return np.array([
            frame.values[w.origin : w.origin + w.lookback, col].max() for w in windows
        ])
    raise SchemaError(f"unknown aggregate mode: {mode!r}")


def chrono_split(
    windows: Sequence[WindowSample],
    n_rows: int,
    fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS,
) -> SplitResult:
    """Assign windows to chronological train/validation/test splits.

    Split boundaries are computed on raw rows; a window belongs to a split
    only if its whole [origin, end) range fits inside it, so windows that
    straddle a boundary are dropped and no look-back or prediction data
    crosses between splits. ``eval_extreme`` collects the validation
    windows flagged extreme.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DimensionError(f"fractions must be 3 positive values summing to 1, got {fr}")
    t1 = int(math.floor(fr[0] * n_rows))
    t2 = int(math.floor((fr[0] + fr[1]) * n_rows))

    train, val, test = [], [], []
    for w in windows:
        if w.end <= t1:
            train.append(w)
        elif w.origin >= t1 and w.end <= t2:
            val.append(w)
        elif w.origin >= t2 and w.end <= n_rows:
            test.append(w)

    eval_extreme = tuple(w for w in val if w.extreme)
    result = SplitResult(
        train=tuple(train), validation=tuple(val), test=tuple(test),
        eval_extreme=eval_extreme, boundaries=(t1, t2),
    )
    for name, ws in (("train", train), ("validation", val), ("test", test)):
        if ws and not any(w.extreme for w in ws):
            warnings.warn(f"{name} split contains no extreme windows")
    logger.info("split windows: %s", result.summary())
    return result


def write_split_manifest(split: SplitResult, path: str | Path) -> Path:
    """JSON manifest of window origins per split, for reproducibility."""
    path = Path(path)
    manifest = {
        "boundaries": list(split.boundaries),
        "train": [w.origin for w in split.train],
        "validation": [w.origin for w in split.validation],
        "test": [w.origin for w in split.test],
        "eval_extreme": [w.origin for w in split.eval_extreme],
    }
    path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return path


def stack_windows(windows: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten windows into (n, lookback*d) inputs and (n, horizon*d*) targets."""
    if not windows:
        raise DataError("cannot stack an empty window sequence")
    x = np.stack([w.x.ravel() for w in windows])
    y = np.stack([w.y.ravel() for w in windows])
    return x, y


def extreme_mask(windows: Sequence[WindowSample]) -> np.ndarray:
    return np.array([w.extreme for w in windows], dtype=bool)


def origins(windows: Sequence[WindowSample]) -> np.ndarray:
    return np.array([w.origin for w in windows], dtype=np.int64)
