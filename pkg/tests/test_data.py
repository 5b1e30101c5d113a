import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tasked.data import (COMMON_CHANNELS, IGNORE_LABEL, CrossDatasetSource, DataWarning,
                         DatasetSpec, SensorRecording, Stream, SyntheticConfig, WindowedDataset,
                         concatenate, cross_dataset_splits, harmonize_cross_dataset,
                         interpolate_missing, loso_splits, loso_sweep, make_synthetic, normalize,
                         normalize_recordings, prepare, resample, select_channels, slide_windows,
                         window_count, window_label)


def rec_of(*rows, labels=None, rate=100.0, subject=1, dataset=""):
    data = np.array(rows, dtype=np.float64)
    if labels is None:
        labels = np.zeros(data.shape[1], dtype=np.int64)
    return SensorRecording(subject, [Stream("imu", data)], rate, labels, dataset=dataset)


class TestRecording:
    def test_stream_lengths_must_agree(self):
        with pytest.raises(ValueError, match="different lengths"):
            SensorRecording(0, [Stream("a", np.zeros((1, 5))), Stream("b", np.zeros((1, 4)))],
                            50.0, np.zeros(5))

    def test_positive_rate(self):
        with pytest.raises(ValueError):
            rec_of([1.0, 2.0], rate=0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DatasetSpec("x", 64, 0)
        with pytest.raises(ValueError):
            DatasetSpec("x", 64, 65)
        with pytest.raises(ValueError):
            DatasetSpec("x", 64, 16, normalization="l2")


class TestInterpolate:
    def test_interior_gap(self):
        out = interpolate_missing(rec_of([1.0, np.nan, 3.0]))
        np.testing.assert_allclose(out.stacked()[0], [1, 2, 3])

    def test_edges(self):
        out = interpolate_missing(rec_of([np.nan, 5.0, 5.0], [4.0, 6.0, np.nan]))
        np.testing.assert_allclose(out.stacked(), [[5, 5, 5], [4, 6, 6]])

    def test_all_missing_names_channel(self):
        with pytest.raises(ValueError, match=r"imu\[1\]"):
            interpolate_missing(rec_of([1.0, 2.0, 3.0], [np.nan] * 3))


class TestNormalize:
    def test_minmax_bounds(self):
        out = normalize(rec_of([0.0, 5.0, 10.0]), "minmax_per_channel", (np.array([0.0]), np.array([10.0])))
        np.testing.assert_allclose(out.stacked()[0], [0, 0.5, 1])

    def test_minmax_clips(self):
        out = normalize(rec_of([-5.0, 5.0, 20.0]), "minmax_per_channel", (np.array([0.0]), np.array([10.0])))
        np.testing.assert_allclose(out.stacked()[0], [0, 0.5, 1])

    def test_zero_variance_warns(self):
        with pytest.warns(DataWarning, match="zero variance"):
            out = normalize(rec_of([2.0, 2.0, 2.0]), "zscore_per_user")
        np.testing.assert_array_equal(out.stacked()[0], [0, 0, 0])

    def test_population_std(self):
        out = normalize(rec_of([1.0, 3.0]), "zscore_per_user")
        np.testing.assert_allclose(out.stacked()[0], [-1, 1])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=40))
    def test_zscore_contract(self, values):
        x = np.array(values)
        if x.std() < 1e-3:
            return
        z = normalize(rec_of(values), "zscore_global").stacked()[0]
        assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6

    def test_per_user_scope(self):
        # two recordings of one user share statistics; another user gets its own
        a = rec_of([0.0, 2.0], subject=1)
        b = rec_of([4.0, 6.0], subject=1)
        c = rec_of([100.0, 102.0], subject=2)
        out = normalize_recordings([a, b, c], "zscore_per_user")
        pooled = np.concatenate([out[0].stacked(), out[1].stacked()], axis=1)
        assert abs(pooled.mean()) < 1e-12 and abs(pooled.std() - 1) < 1e-12
        np.testing.assert_allclose(out[2].stacked()[0], [-1, 1])

    def test_global_scope(self):
        out = normalize_recordings([rec_of([0.0, 2.0], subject=1), rec_of([4.0, 6.0], subject=2)],
                                   "zscore_global")
        pooled = np.concatenate([o.stacked() for o in out], axis=1)
        assert abs(pooled.mean()) < 1e-12 and abs(pooled.std() - 1) < 1e-12


class TestResample:
    def test_ramp_halved(self):
        out = resample(rec_of(np.arange(100.0)), 50.0)
        assert out.length == 50 and out.sample_rate == 50.0
        np.testing.assert_allclose(out.stacked()[0], np.arange(0, 100, 2))

    def test_identity(self):
        rec = rec_of(np.random.default_rng(0).normal(size=37))
        out = resample(rec, 100.0)
        assert np.max(np.abs(out.stacked() - rec.stacked())) <= 1e-12

    def test_labels_nearest(self):
        out = resample(rec_of([0.0, 1, 2, 3], labels=[0, 0, 1, 1]), 50.0)
        np.testing.assert_array_equal(out.labels, [0, 1])

    @pytest.mark.parametrize("src,dst,n,expected", [(100, 50, 101, 51), (30, 50, 31, 52), (50, 30, 7, 4)])
    def test_length_rounding(self, src, dst, n, expected):
        assert resample(rec_of(np.zeros(n), rate=src), dst).length == expected


class TestWindows:
    def spec(self, w=64, step=16):
        return DatasetSpec("t", w, step)

    def test_single_window(self):
        assert len(slide_windows(rec_of(np.zeros(64)), self.spec())) == 1

    def test_offsets(self):
        rec = rec_of(np.arange(96.0))
        ds = slide_windows(rec, self.spec())
        assert len(ds) == 3
        np.testing.assert_array_equal(ds.X[:, 0, 0], [0, 16, 32])

    def test_short_recording_warns(self):
        with pytest.warns(DataWarning, match="shorter than one window"):
            ds = slide_windows(rec_of(np.zeros(10)), self.spec())
        assert len(ds) == 0 and ds.X.shape == (0, 1, 64)

    def test_tie_goes_to_last(self):
        assert window_label(np.array([0] * 32 + [1] * 32)) == 1
        assert window_label(np.array([1] * 32 + [0] * 32)) == 0
        # last label not among the tied majority: latest tied label wins
        assert window_label(np.array([0, 0, 1, 1, 2])) == 1

    def test_majority(self):
        assert window_label(np.array([2, 2, 2, 1])) == 2

    def test_ignored_windows_dropped(self):
        labels = np.r_[np.zeros(64), np.full(64, IGNORE_LABEL)].astype(int)
        ds = slide_windows(rec_of(np.zeros(128), labels=labels), DatasetSpec("t", 64, 64))
        assert len(ds) == 1 and ds.y.tolist() == [0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 80), st.integers(1, 80))
    def test_count_formula(self, length, w, step):
        step = min(step, w)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DataWarning)
            ds = slide_windows(rec_of(np.zeros(length)), DatasetSpec("t", w, step))
        expected = (length - w) // step + 1 if length >= w else 0
        assert len(ds) == window_count(length, w, step) == expected

    def test_grouping_matches_channels(self):
        rec = SensorRecording(3, [Stream("a", np.zeros((2, 70))), Stream("b", np.ones((4, 70)))],
                              50.0, np.zeros(70))
        ds = slide_windows(rec, self.spec())
        assert ds.grouping == [("a", 0, 2), ("b", 2, 6)]
        assert ds.sensor_channels == [2, 4]
        assert (ds.X[:, 2:] == 1).all() and (ds.X[:, :2] == 0).all()


class TestPrepare:
    def test_pipeline_and_contiguous_subjects(self):
        rng = np.random.default_rng(0)
        recs = []
        for sid in (7, 3, 11):
            data = rng.normal(size=(2, 200))
            data[0, 5] = np.nan
            recs.append(SensorRecording(sid, [Stream("imu", data)], 100.0,
                                        rng.integers(0, 3, 200)))
        ds = prepare(recs, DatasetSpec("t", 32, 16, "zscore_per_user", target_rate=50.0), 3)
        assert sorted(set(ds.subjects.tolist())) == [0, 1, 2]
        assert ds.subject_ids == [3, 7, 11]
        assert not np.isnan(ds.X).any()
        assert len(ds) == 3 * window_count(100, 32, 16)

    def test_channel_selection(self):
        rec = SensorRecording(1, [Stream("a", np.arange(12.0).reshape(3, 4)),
                                  Stream("b", np.zeros((2, 4)))], 10.0, np.zeros(4))
        out = select_channels(rec, {"a": [2, 0]})
        np.testing.assert_array_equal(out.stacked(), [[8, 9, 10, 11], [0, 1, 2, 3]])
        with pytest.raises(ValueError):
            select_channels(rec, {"a": [3]})
        with pytest.raises(ValueError):
            select_channels(rec, {"c": [0]})


class TestSaveLoad:
    def test_round_trip(self, tmp_path, small_synthetic):
        small_synthetic.save(tmp_path / "w")
        back = WindowedDataset.load(tmp_path / "w.npz")
        np.testing.assert_array_equal(back.X, small_synthetic.X)
        np.testing.assert_array_equal(back.y, small_synthetic.y)
        np.testing.assert_array_equal(back.subjects, small_synthetic.subjects)
        assert back.grouping == small_synthetic.grouping
        assert back.n_activities == small_synthetic.n_activities


class TestSynthetic:
    def test_count(self):
        ds = make_synthetic(SyntheticConfig(n_subjects=3, n_activities=4,
                                            windows_per_subject_per_activity=10))
        assert len(ds) == 120 and ds.X.shape[1:] == (9, 64)

    def test_no_subject_effect_identical(self):
        ds = make_synthetic(SyntheticConfig(n_subjects=3, subject_effect=0, noise_std=0))
        for a in range(4):
            per_subject = [ds.X[(ds.y == a) & (ds.subjects == k)] for k in range(3)]
            assert all(np.array_equal(per_subject[0], p) for p in per_subject[1:])

    def test_seed_determinism(self):
        cfg = SyntheticConfig(seed=4)
        a, b = make_synthetic(cfg), make_synthetic(cfg)
        assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.y, b.y)
        assert make_synthetic(SyntheticConfig(seed=5)).X.tobytes() != a.X.tobytes()

    def test_subject_effect_is_gain_and_offset(self):
        clean = make_synthetic(SyntheticConfig(n_subjects=2, subject_effect=0, noise_std=0))
        shifted = make_synthetic(SyntheticConfig(n_subjects=2, subject_effect=1, noise_std=0))
        # per subject and channel the shifted windows are an affine map of the clean ones
        for k in range(2):
            x = clean.X[clean.subjects == k][:, 0].ravel()
            z = shifted.X[shifted.subjects == k][:, 0].ravel()
            slope, icpt = np.polyfit(x, z, 1)
            np.testing.assert_allclose(slope * x + icpt, z, atol=1e-4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            SyntheticConfig(n_subjects=0)


class TestLoso:
    def ds(self, n):
        return make_synthetic(SyntheticConfig(n_subjects=n, windows_per_subject_per_activity=2))

    def test_four_subjects(self):
        splits = loso_splits(self.ds(4), 3)
        assert [sp.val_subjects for sp in splits] == [(0,), (1,)]
        assert all(sp.test_subjects == (3,) for sp in splits)

    def test_three_subjects(self):
        ds = self.ds(3)
        splits = loso_splits(ds, 0)
        assert [sp.val_subjects for sp in splits] == [(1,), (2,)]
        assert set(ds.subjects[splits[0].train]) == {2}
        assert set(ds.subjects[splits[1].train]) == {1}

    def test_too_few_subjects(self):
        with pytest.raises(ValueError, match="at least 3"):
            loso_splits(self.ds(2), 0)

    def test_sweep(self):
        assert len(loso_sweep(self.ds(10))) == 20
        assert len(loso_sweep(self.ds(4))) == 8


def _source(name, subjects, n_channels_map, label_map, rate, length=400, seed=0):
    rng = np.random.default_rng(seed)
    n_labels = len(label_map)
    recs = [SensorRecording(s, [Stream("all", rng.normal(size=(18, length)))], rate,
                            np.repeat(rng.integers(0, n_labels, length // 40 + 1), 40)[:length],
                            dataset=name) for s in subjects]
    return CrossDatasetSource(name, recs, n_channels_map, label_map)


IDENTITY_MAP = {c: ("all", i) for i, c in enumerate(COMMON_CHANNELS)}


class TestCrossDataset:
    def test_merge_three(self):
        sources = [_source(n, [1, 2, 3], IDENTITY_MAP, {0: 0, 1: 1, 2: 2, 3: 3}, r, seed=i)
                   for i, (n, r) in enumerate([("a", 30.0), ("b", 100.0), ("c", 50.0)])]
        ds = harmonize_cross_dataset(sources, 4)
        assert ds.X.shape[1:] == (18, 100)
        assert set(ds.y.tolist()) <= {0, 1, 2, 3}
        assert ds.n_subjects == 9 and sorted(set(ds.subjects.tolist())) == list(range(9))
        assert ds.dataset_names == ["a", "b", "c"]
        assert [g[0] for g in ds.grouping] == ["back", "right_hand", "left_ankle"]
        assert ds.sensor_channels == [3, 9, 6]

    def test_thirteen_labels(self):
        label_map = {i: i for i in range(6)}
        sources = [_source(n, [1, 2, 3], IDENTITY_MAP, label_map, 50.0, seed=i)
                   for i, n in enumerate("abcd")]
        ds = harmonize_cross_dataset(sources, 13)
        assert ds.y.min() >= 0 and ds.y.max() < 13

    def test_missing_mapping(self):
        partial = dict(list(IDENTITY_MAP.items())[:-1])
        with pytest.raises(ValueError, match="no mapping"):
            harmonize_cross_dataset([_source("a", [1], partial, {0: 0}, 50.0)], 4)

    def test_single_dataset_matches_windowing(self):
        src = _source("a", [1], IDENTITY_MAP, {i: i for i in range(6)}, 50.0, length=300)
        ds = harmonize_cross_dataset([src], 6, window_size=100, step=16)
        assert len(ds) == window_count(300, 100, 16)

    def test_folds_hold_out_one_subject_per_dataset(self):
        sources = [_source(n, [1, 2, 3, 4], IDENTITY_MAP, {i: i for i in range(4)}, 50.0, seed=i)
                   for i, n in enumerate("abc")]
        ds = harmonize_cross_dataset(sources, 4)
        splits = cross_dataset_splits(ds)
        assert len(splits) == 8
        for sp in splits:
            assert len(sp.test_subjects) == 3
            assert sorted(set(ds.datasets[sp.test].tolist())) == [0, 1, 2]
            assert len(np.intersect1d(sp.train, sp.test)) == 0
            assert len(sp.train) + len(sp.val) + len(sp.test) == len(ds)

    def test_single_dataset_folds_are_loso(self, small_synthetic):
        got = [(s.test_subjects, s.val_subjects) for s in cross_dataset_splits(small_synthetic)]
        want = [(s.test_subjects, s.val_subjects) for s in loso_sweep(small_synthetic)]
        assert got == want


def test_concatenate_keys_by_dataset():
    a = slide_windows(rec_of(np.zeros(64), subject=1, dataset="x"), DatasetSpec("t", 64, 64))
    b = slide_windows(rec_of(np.zeros(64), subject=1, dataset="y"), DatasetSpec("t", 64, 64))
    ds = concatenate([a, b])
    assert ds.subjects.tolist() == [0, 1]
    assert ds.subject_ids == [("x", 1), ("y", 1)]
