"""Readers for the published on-disk layouts of the four benchmark datasets.

Every reader returns one :class:`~tasked.data.SensorRecording` per file with
labels remapped to ``0..n_a-1`` (``-1`` for samples outside the vocabulary).
The column layouts follow each dataset's own documentation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .data import CrossDatasetSource, DatasetSpec, SensorRecording, Stream


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    reader: Callable[..., list[SensorRecording]]
    spec: DatasetSpec
    n_activities: int
    activity_names: tuple[str, ...]


def _read_table(path: Path) -> np.ndarray:
    return pd.read_csv(path, sep=r"\s+", header=None, na_values=["NaN", "nan"]).to_numpy(np.float64)


def _remap(raw: np.ndarray, mapping: dict[int, int]) -> np.ndarray:
    raw = np.nan_to_num(raw, nan=-1).astype(np.int64)
    return np.array([mapping.get(int(v), -1) for v in raw], dtype=np.int64)


def _streams(table: np.ndarray, layout: list[tuple[str, list[int]]]) -> list[Stream]:
    return [Stream(name, table[:, cols].T.copy()) for name, cols in layout]


# --------------------------------------------------------------------------
# Opportunity: S<subject>-ADL<run>.dat / S<subject>-Drill.dat, 250 columns,
# 1-based column numbers below. Body-worn channels only (113).
# --------------------------------------------------------------------------

_OPP_ACCELEROMETERS = ("rkn_up", "hip", "lua_up", "rua_down", "lh", "back", "rkn_down", "rwr",
                       "rua_up", "lua_down", "lwr", "rh")
OPPORTUNITY_LAYOUT: list[tuple[str, list[int]]] = (
    [(f"acc_{n}", list(range(2 + 3 * i, 5 + 3 * i))) for i, n in enumerate(_OPP_ACCELEROMETERS)]
    + [(f"imu_{n}", list(range(start, start + 9)))
       for n, start in (("back", 38), ("rua", 51), ("rla", 64), ("lua", 77), ("lla", 90))]
    + [("imu_lshoe", list(range(103, 119))), ("imu_rshoe", list(range(119, 135)))]
)
_OPP_LOCOMOTION_COL, _OPP_GESTURE_COL = 244, 250
OPPORTUNITY_LOCOMOTION = {0: 0, 1: 1, 2: 2, 4: 3, 5: 4}
OPPORTUNITY_LOCOMOTION_NAMES = ("null", "stand", "walk", "sit", "lie")
OPPORTUNITY_GESTURES = {0: 0, **{code: i + 1 for i, code in enumerate((
    406516, 406517, 404516, 404517, 406520, 404520, 406505, 404505, 406519, 404519,
    406511, 404511, 406508, 404508, 408512, 407521, 405506))}}
OPPORTUNITY_GESTURE_NAMES = (
    "null", "open_door_1", "open_door_2", "close_door_1", "close_door_2", "open_fridge",
    "close_fridge", "open_dishwasher", "close_dishwasher", "open_drawer_1", "close_drawer_1",
    "open_drawer_2", "close_drawer_2", "open_drawer_3", "close_drawer_3", "clean_table",
    "drink_from_cup", "toggle_switch")


def read_opportunity(root, task: str = "locomotion") -> list[SensorRecording]:
    """All ``S*-ADL*.dat`` and ``S*-Drill.dat`` files under ``root``.

    The null class is kept as label 0 in both label sets.
    """
    if task not in ("locomotion", "gestures"):
        raise ValueError("task must be 'locomotion' or 'gestures'")
    col, mapping = ((_OPP_LOCOMOTION_COL, OPPORTUNITY_LOCOMOTION) if task == "locomotion"
                    else (_OPP_GESTURE_COL, OPPORTUNITY_GESTURES))
    layout = [(n, [c - 1 for c in cols]) for n, cols in OPPORTUNITY_LAYOUT]
    recs = []
    for path in sorted(Path(root).rglob("S*-*.dat")):
        m = re.match(r"S(\d+)-(ADL\d+|Drill)\.dat$", path.name)
        if not m:
            continue
        table = _read_table(path)
        recs.append(SensorRecording(int(m.group(1)), _streams(table, layout), 30.0,
                                    _remap(table[:, col - 1], mapping), dataset="opportunity"))
    return recs


# --------------------------------------------------------------------------
# PAMAP2: Protocol/subject10<k>.dat, 54 columns (0-based): 0 timestamp,
# 1 activity, 2 heart rate, then hand/chest/ankle IMUs of 17 columns each
# (temperature, acc16 xyz, acc6 xyz, gyro xyz, mag xyz, orientation x4).
# --------------------------------------------------------------------------

PAMAP2_PROTOCOL = {a: i for i, a in enumerate((1, 2, 3, 4, 5, 6, 7, 12, 13, 16, 17, 24))}
PAMAP2_ACTIVITY_NAMES = ("lying", "sitting", "standing", "walking", "running", "cycling",
                         "nordic_walking", "ascending_stairs", "descending_stairs",
                         "vacuum_cleaning", "ironing", "rope_jumping")
PAMAP2_LAYOUT = [(name, list(range(off + 1, off + 13)))
                 for name, off in (("hand", 3), ("chest", 20), ("ankle", 37))]
PAMAP2_EXCLUDED_SUBJECTS = (109,)


def read_pamap2(root) -> list[SensorRecording]:
    """36 channels: acc16, acc6, gyro and magnetometer of the three IMUs."""
    recs = []
    for path in sorted(Path(root).rglob("subject1*.dat")):
        subject = int(re.search(r"subject(\d+)", path.name).group(1))
        if subject in PAMAP2_EXCLUDED_SUBJECTS:
            continue
        table = _read_table(path)
        recs.append(SensorRecording(subject, _streams(table, PAMAP2_LAYOUT), 100.0,
                                    _remap(table[:, 1], PAMAP2_PROTOCOL), dataset="pamap2"))
    return recs


# --------------------------------------------------------------------------
# MHEALTH: mHealth_subject<k>.log, 24 columns: chest acc (3), ECG (2),
# left ankle acc/gyro/mag (9), right lower arm acc/gyro/mag (9), label.
# --------------------------------------------------------------------------

MHEALTH_ACTIVITIES = {a: a - 1 for a in range(1, 13)}
MHEALTH_ACTIVITY_NAMES = ("standing", "sitting", "lying", "walking", "climbing_stairs",
                          "waist_bends_forward", "frontal_elevation_arms", "knees_bending",
                          "cycling", "jogging", "running", "jump_front_back")
MHEALTH_LAYOUT = [("chest", list(range(0, 5))), ("left_ankle", list(range(5, 14))),
                  ("right_arm", list(range(14, 23)))]


def read_mhealth(root) -> list[SensorRecording]:
    recs = []
    for path in sorted(Path(root).rglob("mHealth_subject*.log")):
        subject = int(re.search(r"subject(\d+)", path.name).group(1))
        table = _read_table(path)
        recs.append(SensorRecording(subject, _streams(table, MHEALTH_LAYOUT), 50.0,
                                    _remap(table[:, 23], MHEALTH_ACTIVITIES), dataset="mhealth"))
    return recs


# --------------------------------------------------------------------------
# RealDISP: subject<k>_ideal.log, 120 columns: 2 timestamps, 9 sensors x 13
# (acc, gyro, mag, quaternion), label. Quaternions are dropped (81 channels).
# --------------------------------------------------------------------------

REALDISP_SENSORS = ("rla", "rua", "back", "lua", "lla", "rc", "rt", "lt", "lc")
REALDISP_LAYOUT = [(n, list(range(2 + 13 * i, 11 + 13 * i))) for i, n in enumerate(REALDISP_SENSORS)]
REALDISP_ACTIVITIES = {a: a - 1 for a in range(1, 34)}
REALDISP_ACTIVITY_NAMES = tuple(f"activity{a}" for a in range(1, 34))


def read_realdisp(root, placement: str = "ideal") -> list[SensorRecording]:
    recs = []
    for path in sorted(Path(root).rglob(f"subject*_{placement}.log")):
        subject = int(re.search(r"subject(\d+)", path.name).group(1))
        table = _read_table(path)
        recs.append(SensorRecording(subject, _streams(table, REALDISP_LAYOUT), 50.0,
                                    _remap(table[:, 119], REALDISP_ACTIVITIES), dataset="realdisp"))
    return recs


def _opportunity_gestures(root):
    return read_opportunity(root, "gestures")


REGISTRY: dict[str, DatasetInfo] = {
    "opportunity_locomotion": DatasetInfo(
        "opportunity_locomotion", read_opportunity,
        DatasetSpec("opportunity_locomotion", 64, 16, "minmax_per_channel"),
        5, OPPORTUNITY_LOCOMOTION_NAMES),
    "opportunity_gestures": DatasetInfo(
        "opportunity_gestures", _opportunity_gestures,
        DatasetSpec("opportunity_gestures", 64, 16, "minmax_per_channel"),
        18, OPPORTUNITY_GESTURE_NAMES),
    "pamap2": DatasetInfo("pamap2", read_pamap2, DatasetSpec("pamap2", 200, 50, "zscore_per_user"),
                          12, PAMAP2_ACTIVITY_NAMES),
    "mhealth": DatasetInfo("mhealth", read_mhealth,
                           DatasetSpec("mhealth", 200, 50, "zscore_per_user"),
                           12, MHEALTH_ACTIVITY_NAMES),
    "realdisp": DatasetInfo("realdisp", read_realdisp,
                            DatasetSpec("realdisp", 120, 60, "zscore_per_user"),
                            33, REALDISP_ACTIVITY_NAMES),
}


def get_adapter(name: str) -> DatasetInfo:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(REGISTRY)}") from None


def load_minmax_bounds(path) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel bounds from a two-column ``min,max`` CSV (one row per channel)."""
    table = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    if table.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns (min, max)")
    return table[:, 0], table[:, 1]


# --------------------------------------------------------------------------
# Cross-dataset presets: 18 shared channels and shared activity vocabularies.
# --------------------------------------------------------------------------

def _block(stream: str, sensor: str, names: tuple[str, ...], first: int) -> dict:
    return {f"{sensor}.{n}": (stream, first + i) for i, n in enumerate(names)}


_ACC = ("acc_x", "acc_y", "acc_z")
_GYRO = ("gyro_x", "gyro_y", "gyro_z")
_MAG = ("mag_x", "mag_y", "mag_z")

CHANNEL_MAPS: dict[str, dict[str, tuple[str, int]]] = {
    "opportunity": {**_block("imu_back", "back", _ACC, 0),
                    **_block("imu_rla", "right_hand", _ACC + _GYRO + _MAG, 0),
                    **_block("imu_lshoe", "left_ankle", _ACC + _GYRO, 6)},
    "pamap2": {**_block("chest", "back", _ACC, 0),
               **_block("hand", "right_hand", _ACC, 0),
               **_block("hand", "right_hand", _GYRO + _MAG, 6),
               **_block("ankle", "left_ankle", _ACC, 0),
               **_block("ankle", "left_ankle", _GYRO, 6)},
    "mhealth": {**_block("chest", "back", _ACC, 0),
                **_block("right_arm", "right_hand", _ACC + _GYRO + _MAG, 0),
                **_block("left_ankle", "left_ankle", _ACC + _GYRO, 0)},
    "realdisp": {**_block("back", "back", _ACC, 0),
                 **_block("rla", "right_hand", _ACC + _GYRO + _MAG, 0),
                 **_block("lc", "left_ankle", _ACC + _GYRO, 0)},
}

COMMON4 = ("lying", "sitting", "standing", "walking")
COMMON13 = ("lying", "sitting", "standing", "walking", "running", "cycling", "jogging",
            "climbing_stairs", "knees_bending", "jump_front_back", "waist_bends_forward",
            "frontal_elevation_arms", "rope_jumping")

# native (already remapped by the reader) label -> shared activity name; Opportunity
# locomotion is 0 null, 1 stand, 2 walk, 3 sit, 4 lie after remapping
_NATIVE_TO_SHARED = {
    "opportunity": {1: "standing", 2: "walking", 3: "sitting", 4: "lying"},
    "pamap2": {0: "lying", 1: "sitting", 2: "standing", 3: "walking", 4: "running",
               5: "cycling", 7: "climbing_stairs", 11: "rope_jumping"},
    "mhealth": {0: "standing", 1: "sitting", 2: "lying", 3: "walking", 4: "climbing_stairs",
                5: "waist_bends_forward", 6: "frontal_elevation_arms", 7: "knees_bending",
                8: "cycling", 9: "jogging", 10: "running", 11: "jump_front_back"},
    "realdisp": {0: "walking", 1: "jogging", 2: "running", 4: "jump_front_back",
                 7: "rope_jumping", 10: "waist_bends_forward", 19: "frontal_elevation_arms",
                 27: "knees_bending", 32: "cycling"},
}


def shared_label_map(dataset: str, vocabulary: tuple[str, ...]) -> dict[int, int]:
    return {native: vocabulary.index(name)
            for native, name in _NATIVE_TO_SHARED[dataset].items() if name in vocabulary}


def cross_dataset_source(dataset: str, recordings: list[SensorRecording],
                         vocabulary: tuple[str, ...]) -> CrossDatasetSource:
    """Preset source for ``dataset`` (one of opportunity, pamap2, mhealth, realdisp)."""
    return CrossDatasetSource(dataset, recordings, CHANNEL_MAPS[dataset],
                              shared_label_map(dataset, vocabulary))
