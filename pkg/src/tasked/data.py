"""Recording cleanup, resampling, windowing and leave-one-subject-out splits.

Recordings are held as ``channels x time`` arrays grouped into named sensor
streams. Per-timestep labels use ``-1`` for samples that belong to no class in
the active vocabulary; windows whose label resolves to ``-1`` are discarded.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

IGNORE_LABEL = -1
NORMALIZATION_MODES = ("minmax_per_channel", "zscore_per_user", "zscore_global")


class DataWarning(UserWarning):
    """Recoverable problem in the input data (degenerate channel, short recording)."""


@dataclass
class Stream:
    name: str
    data: np.ndarray  # (channels, time)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


@dataclass
class SensorRecording:
    subject_id: int
    streams: list[Stream]
    sample_rate: float
    labels: np.ndarray
    dataset: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.streams:
            raise ValueError("recording has no streams")
        lengths = {s.data.shape[1] for s in self.streams}
        if len(lengths) != 1:
            raise ValueError(f"streams have different lengths: {sorted(lengths)}")
        if self.labels.shape != (self.length,):
            raise ValueError(
                f"labels have shape {self.labels.shape}, expected ({self.length},)"
            )

    @property
    def length(self) -> int:
        return self.streams[0].data.shape[1]

    @property
    def n_channels(self) -> int:
        return sum(s.n_channels for s in self.streams)

    def stacked(self) -> np.ndarray:
        return np.concatenate([s.data for s in self.streams], axis=0)

    def with_stacked(self, data: np.ndarray, labels: np.ndarray | None = None,
                     sample_rate: float | None = None) -> "SensorRecording":
        """Return a copy whose streams are re-split from a stacked array."""
        streams, start = [], 0
        for s in self.streams:
            streams.append(Stream(s.name, data[start:start + s.n_channels]))
            start += s.n_channels
        return replace(
            self,
            streams=streams,
            labels=self.labels if labels is None else labels,
            sample_rate=self.sample_rate if sample_rate is None else sample_rate,
        )

    def channel_names(self) -> list[str]:
        return [f"{s.name}[{i}]" for s in self.streams for i in range(s.n_channels)]


@dataclass
class DatasetSpec:
    name: str
    window_size: int
    step: int
    normalization: str = "zscore_per_user"
    channel_selection: dict[str, list[int]] | None = None
    target_rate: float | None = None
    minmax_bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.window_size <= 0:
            raise ValueError("window_size must be positive")
        if not 0 < self.step <= self.window_size:
            raise ValueError("step must satisfy 0 < step <= window_size")
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(
                f"normalization must be one of {NORMALIZATION_MODES}, got {self.normalization!r}"
            )
        if self.target_rate is not None and self.target_rate <= 0:
            raise ValueError("target_rate must be positive")


@dataclass
class WindowedDataset:
    """Windows ``X`` of shape ``(n, channels, window)`` with activity and subject labels.

    ``subjects`` holds contiguous labels ``0..K-1``; ``subject_ids[k]`` is the
    original identifier of subject ``k``. ``datasets`` (optional) tags each
    window with the index of its source dataset in ``dataset_names``.
    """

    X: np.ndarray
    y: np.ndarray
    subjects: np.ndarray
    grouping: list[tuple[str, int, int]]
    subject_ids: list = field(default_factory=list)
    datasets: np.ndarray | None = None
    dataset_names: list[str] = field(default_factory=list)
    activity_names: list[str] | None = None
    n_activities: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        n = len(self.X)
        if len(self.y) != n or len(self.subjects) != n:
            raise ValueError("X, y and subjects must have the same length")
        if self.X.ndim != 3:
            raise ValueError(f"X must be 3-d (n, channels, window), got shape {self.X.shape}")
        stop = 0
        for name, a, b in self.grouping:
            if a != stop or b <= a:
                raise ValueError(f"grouping is not a contiguous partition at {name!r}")
            stop = b
        if stop != self.X.shape[1]:
            raise ValueError(f"grouping covers {stop} channels, windows have {self.X.shape[1]}")
        if self.datasets is not None:
            self.datasets = np.asarray(self.datasets, dtype=np.int64)
        if self.n_activities is None:
            self.n_activities = int(self.y.max()) + 1 if n else 0
        if n and (self.y.min() < 0 or self.y.max() >= self.n_activities):
            raise ValueError("activity label out of range")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def window_size(self) -> int:
        return self.X.shape[2]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids) if self.subject_ids else int(np.unique(self.subjects).size)

    @property
    def sensor_channels(self) -> list[int]:
        return [b - a for _, a, b in self.grouping]

    def subset(self, index) -> "WindowedDataset":
        index = np.asarray(index)
        return replace(
            self,
            X=self.X[index],
            y=self.y[index],
            subjects=self.subjects[index],
            datasets=None if self.datasets is None else self.datasets[index],
        )

    def save(self, path: str | Path) -> None:
        """Write ``<path>.npz`` (arrays) and ``<path>.json`` (metadata sidecar)."""
        path = Path(path)
        arrays = {"X": self.X, "y": self.y, "subjects": self.subjects}
        if self.datasets is not None:
            arrays["datasets"] = self.datasets
        np.savez(path.with_suffix(".npz"), **arrays)
        meta = {
            "format": "tasked-windows/1",
            "n_windows": len(self),
            "window_size": self.window_size,
            "grouping": [list(g) for g in self.grouping],
            "subject_ids": [_jsonable(s) for s in self.subject_ids],
            "dataset_names": list(self.dataset_names),
            "activity_names": self.activity_names,
            "n_activities": self.n_activities,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "WindowedDataset":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with np.load(path.with_suffix(".npz")) as arrays:
            ds = cls(
                X=arrays["X"],
                y=arrays["y"],
                subjects=arrays["subjects"],
                grouping=[tuple(g) for g in meta["grouping"]],
                subject_ids=[tuple(s) if isinstance(s, list) else s for s in meta["subject_ids"]],
                datasets=arrays["datasets"] if "datasets" in arrays else None,
                dataset_names=meta["dataset_names"],
                activity_names=meta["activity_names"],
                n_activities=meta["n_activities"],
            )
        if len(ds) != meta["n_windows"]:
            raise ValueError(f"{path}: sidecar says {meta['n_windows']} windows, found {len(ds)}")
        return ds


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def concatenate(parts: Sequence[WindowedDataset]) -> WindowedDataset:
    """Merge windowed datasets, remapping subjects to contiguous labels.

    Subjects are keyed by ``(dataset name, original id)`` when the parts carry
    dataset names, otherwise by original id, and numbered in sorted key order.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    grouping = parts[0].grouping
    for p in parts[1:]:
        if [g[1:] for g in p.grouping] != [g[1:] for g in grouping]:
            raise ValueError("cannot concatenate datasets with different sensor grouping")
    dataset_names: list[str] = []
    for p in parts:
        for name in p.dataset_names:
            if name not in dataset_names:
                dataset_names.append(name)
    keyed = bool(dataset_names)

    keys_per_part = []
    for p in parts:
        if keyed:
            ds_index = p.datasets if p.datasets is not None else np.zeros(len(p), dtype=np.int64)
            keys = [(p.dataset_names[d], p.subject_ids[s]) for d, s in zip(ds_index, p.subjects)]
        else:
            keys = [p.subject_ids[s] for s in p.subjects]
        keys_per_part.append(keys)

    all_keys = sorted({k for keys in keys_per_part for k in keys}, key=_sort_key)
    if not all_keys:
        all_keys = sorted(
            {(p.dataset_names[0], sid) if keyed else sid for p in parts for sid in p.subject_ids},
            key=_sort_key,
        )
    lookup = {k: i for i, k in enumerate(all_keys)}
    subjects = np.array([lookup[k] for keys in keys_per_part for k in keys], dtype=np.int64)
    datasets = None
    if keyed:
        datasets = np.array(
            [dataset_names.index(k[0]) for keys in keys_per_part for k in keys], dtype=np.int64
        )
    n_act = max(p.n_activities or 0 for p in parts)
    return WindowedDataset(
        X=np.concatenate([p.X for p in parts]),
        y=np.concatenate([p.y for p in parts]),
        subjects=subjects,
        grouping=list(grouping),
        subject_ids=all_keys,
        datasets=datasets,
        dataset_names=dataset_names,
        activity_names=parts[0].activity_names,
        n_activities=n_act,
    )


def _sort_key(key):
    return tuple(str(k) if not isinstance(k, (int, np.integer)) else f"{int(k):012d}" for k in
                 (key if isinstance(key, tuple) else (key,)))


# --------------------------------------------------------------------------
# Per-recording operations
# --------------------------------------------------------------------------

def interpolate_missing(rec: SensorRecording) -> SensorRecording:
    """Fill NaN samples by linear interpolation over time, per channel.

    Leading and trailing gaps take the nearest valid value.
    """
    data = rec.stacked().astype(np.float64, copy=True)
    t = np.arange(rec.length)
    names = rec.channel_names()
    for c in range(data.shape[0]):
        row = data[c]
        missing = np.isnan(row)
        if not missing.any():
            continue
        if missing.all():
            raise ValueError(f"channel {names[c]} of subject {rec.subject_id} is entirely missing")
        row[missing] = np.interp(t[missing], t[~missing], row[~missing])
    return rec.with_stacked(data)


def _minmax(data: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (data.shape[0],))[:, None]
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (data.shape[0],))[:, None]
    span = hi - lo
    if np.any(span <= 0):
        raise ValueError("minmax bounds must satisfy max > min for every channel")
    return np.clip((data - lo) / span, 0.0, 1.0)


def _zscore(data: np.ndarray, names: list[str], mean=None, std=None) -> np.ndarray:
    if mean is None:
        mean = data.mean(axis=1)
        std = data.std(axis=1)
    out = np.zeros_like(data)
    for c in range(data.shape[0]):
        if std[c] <= 1e-12 * max(1.0, abs(mean[c])):
            warnings.warn(f"channel {names[c]} has zero variance; set to 0", DataWarning, stacklevel=3)
            continue
        out[c] = (data[c] - mean[c]) / std[c]
    return out


def normalize(rec: SensorRecording, mode: str,
              bounds: tuple[np.ndarray, np.ndarray] | None = None) -> SensorRecording:
    """Normalize one recording per channel.

    ``minmax_per_channel`` scales by ``bounds=(min, max)`` (computed from the
    recording when omitted) and clips to [0, 1]. Both z-score modes use the
    recording itself as the scope here; see :func:`normalize_recordings` for
    per-user and global scopes spanning several recordings.
    """
    data = rec.stacked().astype(np.float64)
    if mode == "minmax_per_channel":
        if bounds is None:
            bounds = (data.min(axis=1), data.max(axis=1))
        return rec.with_stacked(_minmax(data, *bounds))
    if mode in ("zscore_per_user", "zscore_global"):
        return rec.with_stacked(_zscore(data, rec.channel_names()))
    raise ValueError(f"unknown normalization mode {mode!r}")


def normalize_recordings(recs: Sequence[SensorRecording], mode: str,
                         bounds: tuple[np.ndarray, np.ndarray] | None = None) -> list[SensorRecording]:
    """Normalize with statistics pooled over each user (or over all recordings)."""
    if mode == "minmax_per_channel":
        if bounds is None:
            pooled = np.concatenate([r.stacked() for r in recs], axis=1)
            bounds = (pooled.min(axis=1), pooled.max(axis=1))
        return [normalize(r, mode, bounds) for r in recs]
    if mode == "zscore_per_user":
        scopes: dict = {}
        for i, r in enumerate(recs):
            scopes.setdefault((r.dataset, r.subject_id), []).append(i)
    elif mode == "zscore_global":
        scopes = {None: list(range(len(recs)))}
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out: list[SensorRecording | None] = [None] * len(recs)
    for members in scopes.values():
        pooled = np.concatenate([recs[i].stacked().astype(np.float64) for i in members], axis=1)
        mean, std = pooled.mean(axis=1), pooled.std(axis=1)
        names = recs[members[0]].channel_names()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            for i in members:
                out[i] = recs[i].with_stacked(
                    _zscore(recs[i].stacked().astype(np.float64), names, mean, std))
        for msg in {str(w.message) for w in caught}:
            warnings.warn(msg, DataWarning, stacklevel=2)
    return out


def resample(rec: SensorRecording, target_hz: float) -> SensorRecording:
    """Resample to ``target_hz``: linear interpolation for data, nearest sample for labels."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if target_hz == rec.sample_rate:
        return rec.with_stacked(rec.stacked().copy(), labels=rec.labels.copy())
    n_out = int(np.floor(rec.length * target_hz / rec.sample_rate + 0.5))
    # positions on the source sample grid
    pos = np.arange(n_out) * (rec.sample_rate / target_hz)
    pos = np.minimum(pos, rec.length - 1)
    src = np.arange(rec.length)
    data = rec.stacked().astype(np.float64)
    out = np.stack([np.interp(pos, src, row) for row in data]) if n_out else data[:, :0]
    nearest = np.minimum(np.floor(pos + 0.5).astype(np.int64), rec.length - 1)
    return rec.with_stacked(out, labels=rec.labels[nearest], sample_rate=float(target_hz))


def select_channels(rec: SensorRecording, selection: dict[str, list[int]]) -> SensorRecording:
    streams = []
    by_name = {s.name: s for s in rec.streams}
    for name, idx in selection.items():
        if name not in by_name:
            raise ValueError(f"stream {name!r} not in recording (have {sorted(by_name)})")
        s = by_name[name]
        idx = list(range(s.n_channels)) if idx is None else list(idx)
        if any(i < 0 or i >= s.n_channels for i in idx):
            raise ValueError(f"channel index out of range for stream {name!r}")
        streams.append(Stream(name, s.data[idx]))
    return replace(rec, streams=streams)


def window_label(labels: np.ndarray) -> int:
    """Majority label; ties go to the last timestep's label when it is tied,
    otherwise to the tied label occurring latest."""
    values, counts = np.unique(labels, return_counts=True)
    tied = values[counts == counts.max()]
    if len(tied) == 1:
        return int(tied[0])
    last = labels[-1]
    if last in tied:
        return int(last)
    latest = {v: np.flatnonzero(labels == v)[-1] for v in tied}
    return int(max(latest, key=latest.get))


def window_count(length: int, window: int, step: int) -> int:
    return 0 if length < window else (length - window) // step + 1


def slide_windows(rec: SensorRecording, spec: DatasetSpec,
                  n_activities: int | None = None) -> WindowedDataset:
    """Cut a recording into fixed windows at offsets 0, step, 2*step, ..."""
    data = rec.stacked().astype(np.float32)
    grouping, start = [], 0
    for s in rec.streams:
        grouping.append((s.name, start, start + s.n_channels))
        start += s.n_channels
    w, step = spec.window_size, spec.step
    n = window_count(rec.length, w, step)
    if n == 0:
        warnings.warn(
            f"recording of subject {rec.subject_id} has {rec.length} samples, "
            f"shorter than one window ({w}); no windows produced",
            DataWarning,
            stacklevel=2,
        )
        X = np.zeros((0, data.shape[0], w), dtype=np.float32)
        y = np.zeros(0, dtype=np.int64)
    else:
        view = np.lib.stride_tricks.sliding_window_view(data, w, axis=1)[:, ::step][:, :n]
        X = np.ascontiguousarray(view.transpose(1, 0, 2))
        y = np.array([window_label(rec.labels[i * step:i * step + w]) for i in range(n)],
                     dtype=np.int64)
        keep = y != IGNORE_LABEL
        X, y = X[keep], y[keep]
    return WindowedDataset(
        X=X,
        y=y,
        subjects=np.zeros(len(y), dtype=np.int64),
        grouping=grouping,
        subject_ids=[rec.subject_id],
        datasets=np.zeros(len(y), dtype=np.int64) if rec.dataset else None,
        dataset_names=[rec.dataset] if rec.dataset else [],
        n_activities=n_activities if n_activities is not None else (int(y.max()) + 1 if len(y) else 0),
    )


def prepare(recs: Sequence[SensorRecording], spec: DatasetSpec, n_activities: int | None = None,
            activity_names: list[str] | None = None) -> WindowedDataset:
    """Full single-dataset pipeline: select, interpolate, resample, normalize, window."""
    recs = list(recs)
    if spec.channel_selection:
        recs = [select_channels(r, spec.channel_selection) for r in recs]
    recs = [interpolate_missing(r) for r in recs]
    if spec.target_rate is not None:
        recs = [resample(r, spec.target_rate) for r in recs]
    recs = normalize_recordings(recs, spec.normalization, spec.minmax_bounds)
    if n_activities is None:
        n_activities = max(int(r.labels.max()) for r in recs) + 1
    ds = concatenate([slide_windows(r, spec, n_activities) for r in recs])
    ds.activity_names = activity_names
    return ds


# --------------------------------------------------------------------------
# Cross-dataset harmonization
# --------------------------------------------------------------------------

COMMON_SENSORS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("back", ("acc_x", "acc_y", "acc_z")),
    ("right_hand", ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z",
                    "mag_x", "mag_y", "mag_z")),
    ("left_ankle", ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z")),
)
COMMON_CHANNELS = tuple(f"{s}.{c}" for s, chans in COMMON_SENSORS for c in chans)


@dataclass
class CrossDatasetSource:
    """One dataset's contribution to a merged cross-dataset benchmark.

    ``channel_map`` maps every entry of :data:`COMMON_CHANNELS` to a
    ``(stream name, channel index)`` in this dataset's recordings;
    ``label_map`` maps native labels to the shared vocabulary (unmapped labels
    are dropped).
    """

    name: str
    recordings: list[SensorRecording]
    channel_map: dict[str, tuple[str, int]]
    label_map: dict[int, int]


def to_common_channels(rec: SensorRecording, source: CrossDatasetSource) -> SensorRecording:
    missing = [c for c in COMMON_CHANNELS if c not in source.channel_map]
    if missing:
        raise ValueError(f"dataset {source.name!r} has no mapping for common channels {missing}")
    by_name = {s.name: s for s in rec.streams}
    streams = []
    for sensor, chans in COMMON_SENSORS:
        rows = []
        for c in chans:
            stream, idx = source.channel_map[f"{sensor}.{c}"]
            if stream not in by_name or not 0 <= idx < by_name[stream].n_channels:
                raise ValueError(
                    f"dataset {source.name!r}: common channel {sensor}.{c} -> {stream}[{idx}] "
                    "not present in recording"
                )
            rows.append(by_name[stream].data[idx])
        streams.append(Stream(sensor, np.stack(rows)))
    labels = np.array([source.label_map.get(int(l), IGNORE_LABEL) for l in rec.labels],
                      dtype=np.int64)
    return SensorRecording(rec.subject_id, streams, rec.sample_rate, labels, dataset=source.name)


def harmonize_cross_dataset(sources: Sequence[CrossDatasetSource], n_activities: int,
                            window_size: int = 100, step: int = 16, target_hz: float = 50.0,
                            normalization: str = "zscore_global",
                            activity_names: list[str] | None = None) -> WindowedDataset:
    """Merge several datasets onto the 18 shared channels and a shared label vocabulary.

    Subjects are made globally unique by keying on ``(dataset, subject id)``.
    """
    spec = DatasetSpec("cross_dataset", window_size, step, normalization, target_rate=target_hz)
    recs = []
    for src in sources:
        if any(r.dataset not in ("", src.name) for r in src.recordings):
            raise ValueError(f"source {src.name!r} contains recordings of another dataset")
        for r in src.recordings:
            r = to_common_channels(r, src)
            r = interpolate_missing(r)
            recs.append(resample(r, target_hz))
    recs = normalize_recordings(recs, normalization)
    parts = [slide_windows(r, spec, n_activities) for r in recs]
    ds = concatenate(parts)
    ds.activity_names = activity_names
    # keep source order for dataset indices
    order = [s.name for s in sources]
    if ds.datasets is not None and ds.dataset_names != order:
        remap = np.array([order.index(n) for n in ds.dataset_names])
        ds.datasets = remap[ds.datasets]
        ds.dataset_names = order
    return ds


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_subjects: int = 4
    n_activities: int = 4
    sensors: list[int] = field(default_factory=lambda: [3, 3, 3])
    window_size: int = 64
    windows_per_subject_per_activity: int = 20
    subject_effect: float = 0.5
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_activities", "window_size", "windows_per_subject_per_activity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.sensors or any(c <= 0 for c in self.sensors):
            raise ValueError("sensors must be a non-empty list of positive channel counts")
        if self.subject_effect < 0 or self.noise_std < 0:
            raise ValueError("subject_effect and noise_std must be non-negative")


def make_synthetic(cfg: SyntheticConfig) -> WindowedDataset:
    """Multi-subject windows with per-activity waveforms and per-subject gain/offset.

    Activity ``a`` oscillates at ``a + 1`` cycles per window with a second
    harmonic and per-channel phases; window ``j`` of activity ``a`` uses the
    same phase shift for every subject, so with no subject effect and no noise
    all subjects produce identical windows.
    """
    rng = np.random.default_rng(cfg.seed)
    n_c, w = sum(cfg.sensors), cfg.window_size
    reps = cfg.windows_per_subject_per_activity
    t = np.arange(w) / w

    amp = rng.uniform(0.5, 1.5, size=(cfg.n_activities, n_c))
    harm = rng.uniform(-0.5, 0.5, size=(cfg.n_activities, n_c))
    phase = rng.uniform(0, 2 * np.pi, size=(cfg.n_activities, n_c))
    level = rng.normal(0, 0.5, size=(cfg.n_activities, n_c))
    shift = rng.uniform(0, 2 * np.pi, size=(cfg.n_activities, reps))
    gain = np.exp(0.5 * cfg.subject_effect * rng.standard_normal((cfg.n_subjects, n_c)))
    offset = cfg.subject_effect * rng.standard_normal((cfg.n_subjects, n_c))

    freq = np.arange(1, cfg.n_activities + 1)[:, None, None, None]
    arg = (2 * np.pi * freq * t[None, None, None, :]
           + phase[:, None, :, None] + shift[:, :, None, None])  # (a, j, c, t)
    base = (amp[:, None, :, None] * np.sin(arg)
            + harm[:, None, :, None] * np.sin(2 * arg)
            + level[:, None, :, None])

    X = gain[:, None, None, :, None] * base[None] + offset[:, None, None, :, None]  # (k, a, j, c, t)
    X = X + cfg.noise_std * rng.standard_normal(X.shape)
    X = X.reshape(-1, n_c, w).astype(np.float32)
    k, a, _ = np.meshgrid(np.arange(cfg.n_subjects), np.arange(cfg.n_activities), np.arange(reps),
                          indexing="ij")
    grouping, start = [], 0
    for i, c in enumerate(cfg.sensors):
        grouping.append((f"sensor{i}", start, start + c))
        start += c
    return WindowedDataset(
        X=X,
        y=a.ravel(),
        subjects=k.ravel(),
        grouping=grouping,
        subject_ids=list(range(cfg.n_subjects)),
        activity_names=[f"activity{i}" for i in range(cfg.n_activities)],
        n_activities=cfg.n_activities,
    )


# --------------------------------------------------------------------------
# Leave-one-subject-out splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    test_subjects: tuple[int, ...]
    val_subjects: tuple[int, ...]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def fold_id(self) -> str:
        t = "+".join(map(str, self.test_subjects))
        v = "+".join(map(str, self.val_subjects))
        return f"test{t}_val{v}"


def _split_from_subjects(subjects: np.ndarray, test: Iterable[int], val: Iterable[int]) -> Split:
    test, val = tuple(int(s) for s in test), tuple(int(s) for s in val)
    is_test = np.isin(subjects, test)
    is_val = np.isin(subjects, val)
    return Split(
        test_subjects=test,
        val_subjects=val,
        train=np.flatnonzero(~is_test & ~is_val),
        val=np.flatnonzero(is_val),
        test=np.flatnonzero(is_test),
    )


def loso_splits(ds: WindowedDataset, test_subject: int) -> list[Split]:
    """The two (train, val, test) splits holding out ``test_subject``.

    Validation is the first, respectively second, remaining subject in
    ascending order; training gets everything else.
    """
    present = np.unique(ds.subjects)
    if len(present) < 3:
        raise ValueError(f"leave-one-subject-out needs at least 3 subjects, got {len(present)}")
    if test_subject not in present:
        raise ValueError(f"subject {test_subject} not in dataset")
    others = [int(s) for s in present if s != test_subject]
    return [_split_from_subjects(ds.subjects, [test_subject], [v]) for v in others[:2]]


def loso_sweep(ds: WindowedDataset) -> list[Split]:
    return [split for s in np.unique(ds.subjects) for split in loso_splits(ds, int(s))]


def cross_dataset_splits(ds: WindowedDataset) -> list[Split]:
    """Folds holding out one subject of every constituent dataset at once.

    Fold ``i`` tests the ``i``-th subject (ascending) of each dataset; its two
    variants validate on the first, respectively second, remaining subject of
    each dataset. The fold count is the smallest per-dataset subject count.
    """
    if ds.datasets is None or len(ds.dataset_names) <= 1:
        return loso_sweep(ds)
    per_dataset = [np.unique(ds.subjects[ds.datasets == d]) for d in range(len(ds.dataset_names))]
    for name, subs in zip(ds.dataset_names, per_dataset):
        if len(subs) < 3:
            raise ValueError(f"dataset {name!r} has {len(subs)} subjects; need at least 3")
    splits = []
    for i in range(min(len(s) for s in per_dataset)):
        test = [int(s[i]) for s in per_dataset]
        for variant in range(2):
            val = [int(np.delete(s, i)[variant]) for s in per_dataset]
            splits.append(_split_from_subjects(ds.subjects, test, val))
    return splits
