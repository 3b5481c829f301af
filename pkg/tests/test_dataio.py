import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tailcast import dataio
from tailcast.errors import (
    DataError,
    DegenerateFeatureError,
    DimensionError,
    IntegrityError,
    SchemaError,
)

BASE_HOUR = 400_000  # arbitrary epoch-hour origin for synthetic frames


def make_frame(values, target_indices=(0,), start_hour=BASE_HOUR):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = tuple(f"f{i}" for i in range(values.shape[1]))
    ts = start_hour + np.arange(values.shape[0], dtype=float)
    return dataio.TimeSeriesFrame(ts, values, names, target_indices)


def write_csv(path, rows, header=("ts", "a", "b")):
    lines = [",".join(header)]
    lines += [",".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def simple_schema():
    return dataio.CsvSchema("ts", ("a", "b"), ("a",))


class TestLoadCsv:
    def test_five_row_csv(self, tmp_path):
        rows = [(i * 3600, i * 1.0, i * 2.0) for i in range(5)]
        path = write_csv(tmp_path / "d.csv", rows)
        frame = dataio.load_csv(path, simple_schema())
        assert frame.n_rows == 5
        assert frame.n_features == 2
        assert frame.target_indices == (0,)
        assert np.allclose(np.diff(frame.timestamps), 1.0)

    def test_iso_timestamps(self, tmp_path):
        rows = [(f"2020-01-01T{h:02d}:00:00+00:00", h, h) for h in range(4)]
        path = write_csv(tmp_path / "d.csv", rows)
        frame = dataio.load_csv(path, simple_schema())
        assert np.allclose(np.diff(frame.timestamps), 1.0)

    def test_missing_target_column(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", [(0, 1.0)], header=("ts", "b"))
        with pytest.raises(SchemaError, match="a"):
            dataio.load_csv(path, simple_schema())

    def test_duplicate_timestamp_cites_row(self, tmp_path):
        hours = [0, 1, 2, 2, 4]
        rows = [(h * 3600, 1.0, 2.0) for h in hours]
        path = write_csv(tmp_path / "d.csv", rows)
        with pytest.raises(IntegrityError, match="row 3"):
            dataio.load_csv(path, simple_schema())

    def test_garbage_cell_cites_row_and_column(self, tmp_path):
        rows = [(0, 1.0, 2.0), (3600, "oops", 2.0)]
        path = write_csv(tmp_path / "d.csv", rows)
        with pytest.raises(IntegrityError, match="row 1"):
            dataio.load_csv(path, simple_schema())

    def test_nan_rows_dropped_and_segmented(self, tmp_path):
        rows = [(i * 3600, "" if i == 3 else float(i), 1.0 + i) for i in range(8)]
        path = write_csv(tmp_path / "d.csv", rows)
        frame = dataio.load_csv(path, simple_schema())
        assert frame.n_rows == 7
        assert frame.segments() == [(0, 3), (3, 7)]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            dataio.load_csv(tmp_path / "nope.csv", simple_schema())


class TestNormalizer:
    def test_min_max_on_full_series(self):
        frame = make_frame([0.0, 5.0, 10.0])
        norm = dataio.fit_normalizer(frame, 1.0)
        assert norm.mins[0] == 0.0 and norm.maxs[0] == 10.0

    def test_transform_and_inverse_point(self):
        frame = make_frame([0.0, 5.0, 10.0])
        norm = dataio.fit_normalizer(frame, 1.0)
        assert norm.transform(np.array([5.0]))[0] == pytest.approx(0.5, abs=0)
        assert norm.inverse_transform(np.array([0.5]))[0] == pytest.approx(5.0, abs=0)

    def test_constant_feature_rejected(self):
        frame = make_frame(np.column_stack([np.full(6, 2.0), np.arange(6.0)]),
                           target_indices=(1,))
        with pytest.raises(DegenerateFeatureError, match="f0"):
            dataio.fit_normalizer(frame, 1.0)

    def test_fit_uses_training_rows_only(self):
        vals = np.arange(10.0)
        frame = make_frame(vals)
        norm = dataio.fit_normalizer(frame, 0.5)
        assert norm.maxs[0] == 4.0  # first 5 rows only

    @given(v=st.floats(min_value=-100.0, max_value=100.0))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_within_1e12(self, v):
        norm = dataio.Normalizer(np.array([-100.0]), np.array([100.0]), (0,))
        back = norm.inverse_transform(norm.transform(np.array([v])))[0]
        assert abs(back - v) <= 1e-12


class TestMakeWindows:
    def test_window_count_formula(self):
        frame = make_frame(np.linspace(0, 1, 100))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback=72, horizon=12)
        assert len(windows) == 100 - 72 - 12 + 1 == 17

    def test_single_window_boundary(self):
        frame = make_frame(np.linspace(0, 1, 84))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback=72, horizon=12)
        assert len(windows) == 1
        assert windows[0].origin == 0

    def test_shapes_and_normalization(self):
        vals = np.column_stack([np.arange(30.0), np.arange(30.0) * 2])
        frame = make_frame(vals, target_indices=(1,))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback=4, horizon=2)
        w = windows[0]
        assert w.x.shape == (4, 2) and w.y.shape == (2, 1)
        assert w.x.min() >= 0.0 and w.x.max() <= 1.0

    def test_windows_never_span_gaps(self):
        ts = BASE_HOUR + np.array([0, 1, 2, 3, 10, 11, 12, 13, 14.0])
        vals = np.arange(9.0)[:, None]
        frame = dataio.TimeSeriesFrame(ts, vals, ("f0",), (0,))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback=2, horizon=1)
        starts = sorted(w.origin for w in windows)
        assert starts == [0, 1, 4, 5, 6]  # none starting at rows 2..3

    def test_too_short_segment_warns_empty(self):
        ts = BASE_HOUR + np.array([0.0, 1, 2, 10, 11, 12])
        frame = dataio.TimeSeriesFrame(ts, np.arange(6.0)[:, None], ("f0",), (0,))
        norm = dataio.fit_normalizer(frame, 1.0)
        with pytest.warns(UserWarning):
            windows = dataio.make_windows(frame, norm, lookback=3, horizon=1)
        assert windows == []

    @given(
        n=st.integers(min_value=2, max_value=300),
        lookback=st.integers(min_value=1, max_value=80),
        horizon=st.integers(min_value=1, max_value=40),
    )
    @settings(max_examples=80, deadline=None)
    def test_count_property(self, n, lookback, horizon):
        if lookback + horizon > n:
            return
        frame = make_frame(np.linspace(0.0, 1.0, n))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback, horizon)
        assert len(windows) == n - lookback - horizon + 1


class TestLabelExtremes:
    def test_all_equal_targets_yield_no_extremes(self):
        frame = make_frame(np.full(40, 3.0))
        windows = [dataio.WindowSample(np.zeros((4, 1)), np.zeros((2, 1)), origin=o)
                   for o in range(0, 30)]
        labeled, thr = dataio.label_extremes(windows, frame, percentile=95.0, train_end=28)
        assert thr[0] == 3.0
        assert not any(w.extreme for w in labeled)

    def test_injected_spike_flags_exact_windows(self):
        rng = np.random.default_rng(0)
        n, lookback, horizon = 200, 6, 3
        vals = rng.uniform(0.0, 1.0, n)
        spike_at = 120
        vals[spike_at] = 50.0
        frame = make_frame(vals)
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback, horizon)
        # percentile high enough that the threshold falls strictly between
        # the base range and the spike, so only spike windows can cross it
        labeled, thr = dataio.label_extremes(windows, frame, percentile=99.9,
                                             train_end=n)
        assert 1.0 < thr[0] < 50.0
        # independent enumeration of prediction windows covering the spike
        expected = {
            w.origin for w in windows
            if w.origin + lookback <= spike_at < w.origin + lookback + horizon
        }
        flagged = {w.origin for w in labeled if w.extreme}
        assert flagged == expected
        assert len(expected) == horizon

    def test_point_ratio_matches_one_to_nineteen(self):
        # continuous data: the 95th-percentile threshold puts ~5% of the
        # training rows in the tail, i.e. an extreme:normal ratio of ~1:19
        rng = np.random.default_rng(1)
        vals = rng.exponential(size=20_000)
        frame = make_frame(vals)
        train_end = dataio.training_row_count(frame.n_rows)
        _, thr = dataio.label_extremes([], frame, percentile=95.0, train_end=train_end)
        above = int((frame.values[:train_end, 0] > thr[0]).sum())
        below = train_end - above
        assert above / below == pytest.approx(1.0 / 19.0, rel=0.02)

    def test_horizon_one_window_fraction_near_five_percent(self):
        rng = np.random.default_rng(2)
        frame = make_frame(rng.normal(size=5000))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, lookback=8, horizon=1)
        labeled, _ = dataio.label_extremes(windows, frame, percentile=95.0,
                                           train_end=frame.n_rows)
        frac = np.mean([w.extreme for w in labeled])
        assert 0.04 <= frac <= 0.06

    def test_covariate_mode_uses_lookback_max(self):
        vals = np.column_stack([np.zeros(50), np.zeros(50)])
        vals[20, 1] = 9.0  # covariate spike
        frame = make_frame(vals + np.linspace(0, 1, 50)[:, None] * 0.01,
                           target_indices=(0,))
        windows = [dataio.WindowSample(np.zeros((5, 2)), np.zeros((2, 1)), origin=o)
                   for o in range(0, 40)]
        labeled, _ = dataio.label_extremes(windows, frame, mode="covariate:f1",
                                           percentile=95.0, train_end=50)
        flagged = {w.origin for w in labeled if w.extreme}
        assert flagged == {o for o in range(40) if o <= 20 < o + 5}

    def test_unknown_covariate(self):
        frame = make_frame(np.arange(20.0))
        with pytest.raises(SchemaError):
            dataio.label_extremes([], frame, mode="covariate:nope", train_end=10)

    def test_threshold_ignores_test_segment(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=1000)
        frame_a = make_frame(vals)
        vals_b = vals.copy()
        vals_b[800:] += 100.0  # corrupt the tail only
        frame_b = make_frame(vals_b)
        norm = dataio.fit_normalizer(frame_a, 0.7)
        windows = dataio.make_windows(frame_a, norm, lookback=10, horizon=5)
        train_end = dataio.training_row_count(1000)
        train_windows = [w for w in windows if w.end <= train_end]
        la, _ = dataio.label_extremes(train_windows, frame_a, train_end=train_end)
        lb, _ = dataio.label_extremes(train_windows, frame_b, train_end=train_end)
        assert [w.extreme for w in la] == [w.extreme for w in lb]


class TestChronoSplit:
    def build_thousand_windows(self):
        lookback, horizon = 72, 12
        n = 1000 + lookback + horizon - 1  # exactly 1000 windows
        rng = np.random.default_rng(4)
        frame = make_frame(rng.normal(size=n))
        norm = dataio.fit_normalizer(frame, 0.7)
        windows = dataio.make_windows(frame, norm, lookback, horizon)
        assert len(windows) == 1000
        labeled, _ = dataio.label_extremes(windows, frame,
                                           train_end=dataio.training_row_count(n))
        return labeled, n, lookback + horizon

    def test_boundary_trimming_counts(self):
        windows, n, span = self.build_thousand_windows()
        split = dataio.chrono_split(windows, n)
        t1, t2 = split.boundaries
        # independent enumeration over all origins
        exp_train = sum(1 for o in range(1000) if o + span <= t1)
        exp_val = sum(1 for o in range(1000) if o >= t1 and o + span <= t2)
        exp_test = sum(1 for o in range(1000) if o >= t2 and o + span <= n)
        assert (len(split.train), len(split.validation), len(split.test)) == \
            (exp_train, exp_val, exp_test) == (675, 79, 80)

    def test_no_window_straddles_a_cut(self):
        windows, n, _ = self.build_thousand_windows()
        split = dataio.chrono_split(windows, n)
        t1, t2 = split.boundaries
        assert all(w.end <= t1 for w in split.train)
        assert all(w.origin >= t1 and w.end <= t2 for w in split.validation)
        assert all(w.origin >= t2 for w in split.test)

    def test_train_test_never_overlap_in_raw_rows(self):
        windows, n, _ = self.build_thousand_windows()
        split = dataio.chrono_split(windows, n)
        train_rows = set()
        for w in split.train:
            train_rows.update(range(w.origin, w.end))
        for w in split.test:
            assert train_rows.isdisjoint(range(w.origin, w.end))

    def test_eval_extreme_contains_only_extremes(self):
        windows, n, _ = self.build_thousand_windows()
        split = dataio.chrono_split(windows, n)
        assert all(w.extreme for w in split.eval_extreme)
        assert len(split.eval_extreme) == sum(w.extreme for w in split.validation)

    def test_zero_extreme_validation_warns(self):
        frame = make_frame(np.linspace(0, 1, 300))
        norm = dataio.fit_normalizer(frame, 0.7)
        windows = dataio.make_windows(frame, norm, 5, 2)
        # training percentile of an increasing ramp: only late (test) rows
        # exceed it, so validation has no extremes
        labeled, _ = dataio.label_extremes(windows, frame, percentile=99.0,
                                           train_end=dataio.training_row_count(300))
        labeled = [dataio.WindowSample(w.x, w.y, w.origin, False) for w in labeled]
        with pytest.warns(UserWarning):
            split = dataio.chrono_split(labeled, 300)
        assert split.eval_extreme == ()

    def test_deterministic(self):
        windows, n, _ = self.build_thousand_windows()
        a = dataio.chrono_split(windows, n)
        b = dataio.chrono_split(windows, n)
        assert dataio.origins(a.train).tolist() == dataio.origins(b.train).tolist()
        assert a.summary() == b.summary()

    def test_bad_fractions(self):
        with pytest.raises(DimensionError):
            dataio.chrono_split([], 100, fractions=(0.5, 0.5, 0.5))


class TestManifestAndStacking:
    def test_split_manifest_json(self, tmp_path):
        frame = make_frame(np.random.default_rng(5).normal(size=400))
        norm = dataio.fit_normalizer(frame, 0.7)
        windows = dataio.make_windows(frame, norm, 10, 5)
        labeled, _ = dataio.label_extremes(windows, frame,
                                           train_end=dataio.training_row_count(400))
        split = dataio.chrono_split(labeled, 400)
        path = dataio.write_split_manifest(split, tmp_path / "split.json")
        manifest = json.loads(path.read_text())
        assert manifest["train"] == [w.origin for w in split.train]
        assert set(manifest) == {"boundaries", "train", "validation", "test", "eval_extreme"}

    def test_stack_windows_shapes(self):
        frame = make_frame(np.column_stack([np.arange(40.0), np.arange(40.0)]),
                           target_indices=(0, 1))
        norm = dataio.fit_normalizer(frame, 1.0)
        windows = dataio.make_windows(frame, norm, 6, 3)
        x, y = dataio.stack_windows(windows)
        assert x.shape == (len(windows), 12)
        assert y.shape == (len(windows), 6)

    def test_stack_empty_rejected(self):
        with pytest.raises(DataError):
            dataio.stack_windows([])
