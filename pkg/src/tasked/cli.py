"""Config-driven experiment runner.

Usage::

    tasked CONFIG.yaml [--override key.path=value ...] [--workers N] [--out DIR]

The config is a YAML mapping::

    mode: loso                 # prepare | train | loso | cross_dataset | report
    seed: 0                    # root seed for data, init, dropout and batching
    output_dir: runs/demo      # relative paths resolve against $TASKED_OUTPUT_ROOT
    method: TASKED             # row label in result tables
    workers: 1
    plots: false
    data:
      synthetic: {n_subjects: 4, ...}              # or
      datasets:                                    # real data via the adapter registry
        - {name: mhealth, root: /data/MHEALTHDATASET}
      prepared: windows.npz                        # or a file written by mode=prepare
      cross_dataset: {vocabulary: common4, window_size: 100, step: 16, target_hz: 50}
      test_subject: 0                              # mode=train only
    model: {stem_channels: 32, ...}
    train: {epochs: 200, hyper: {alpha: 0.6, ...}, ...}

Unknown keys anywhere are rejected with their full key path.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import traceback
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from . import __version__
from .adapters import (COMMON4, COMMON13, cross_dataset_source, get_adapter,
                       load_minmax_bounds)
from .data import (DatasetSpec, SyntheticConfig, WindowedDataset, harmonize_cross_dataset,
                   loso_splits, make_synthetic, prepare)
from .evaluation import (FoldResult, SweepReport, confusion_matrix, read_results,
                         run_cross_dataset, run_loso, write_results, write_tables)
from .losses import LossHyper
from .model import ModelConfig
from .training import TrainConfig, predict, train

MODES = ("prepare", "train", "loso", "cross_dataset", "report")
OUTPUT_ROOT_ENV = "TASKED_OUTPUT_ROOT"
VOCABULARIES = {"common4": COMMON4, "common13": COMMON13}
# ModelConfig fields filled in from the data rather than the config file
_DERIVED_MODEL_FIELDS = ("sensor_channels", "window_size", "n_activities", "n_domains")

# behavior the method leaves open, recorded in every run manifest
DESIGN_SWITCHES = {
    "window_label": "majority vote, last-timestep tie-break",
    "label_resampling": "nearest neighbor",
    "attention_heads": 4,
    "temporal_kernel": 5,
    "residual": "around the attention sub-block only",
    "attention_batchnorm": "after value aggregation and projection",
    "drop_connect_empty_row": "uniform 1/S",
    "kernel_bandwidths": "median pairwise distance x (1/4, 1/2, 1, 2, 4), equal weights",
    "mmd_input": "embeddings mean-pooled over time",
    "kd_reduction": "batch mean of per-window KL, no tau^2 factor",
    "class_weights": "n / (n_a * n_i), rescaled to mean 1",
    "dice": "single global dice over samples and classes",
    "epochs": "per phase, each with its own early stopping",
    "early_stopping_metric": "validation macro-F1",
    "optimizer_reset_between_phases": True,
    "batches": "subject-stratified",
    "returned_model": "best-validation phase-2 checkpoint",
    "std": "population std across folds; across test subjects also reported",
    "opportunity_gestures_null": "null counted as class 0 of 18",
}

log = logging.getLogger("tasked")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


# --------------------------------------------------------------------------
# Schema
# --------------------------------------------------------------------------

@dataclass
class DatasetEntry:
    name: str
    root: str
    window_size: int | None = None
    step: int | None = None
    normalization: str | None = None
    minmax_bounds: str | None = None
    target_rate: float | None = None


@dataclass
class CrossDatasetOptions:
    vocabulary: str = "common4"
    window_size: int = 100
    step: int = 16
    target_hz: float = 50.0
    normalization: str = "zscore_global"


@dataclass
class DataConfig:
    synthetic: dict | None = None
    datasets: list[DatasetEntry] = field(default_factory=list)
    prepared: str | None = None
    cross_dataset: CrossDatasetOptions | None = None
    test_subject: int = 0


@dataclass
class ExperimentConfig:
    mode: str
    seed: int = 0
    output_dir: str = "runs/experiment"
    method: str = "TASKED"
    workers: int = 1
    plots: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Any) -> "ExperimentConfig":
        cfg = _build(cls, raw, "")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        _check_keys(self.model, _model_keys(), "model")
        if "seed" in self.train:
            raise ConfigError("train.seed", "set the root 'seed' instead")
        _check_keys(self.train, {f.name for f in fields(TrainConfig)} - {"seed"}, "train")
        if isinstance(self.train.get("hyper"), dict):
            _check_keys(self.train["hyper"], {f.name for f in fields(LossHyper)}, "train.hyper")
        if self.data.synthetic is not None:
            if "seed" in self.data.synthetic:
                raise ConfigError("data.synthetic.seed", "set the root 'seed' instead")
            _check_keys(self.data.synthetic, {f.name for f in fields(SyntheticConfig)} - {"seed"},
                        "data.synthetic")
        if self.mode == "report":
            return
        sources = sum(x is not None and x != [] for x in
                      (self.data.synthetic, self.data.datasets or None, self.data.prepared))
        if sources != 1:
            raise ConfigError("data", "give exactly one of synthetic, datasets or prepared")
        for i, entry in enumerate(self.data.datasets):
            key = f"data.datasets.{i}"
            try:
                get_adapter(entry.name)
            except KeyError as exc:
                raise ConfigError(f"{key}.name", str(exc.args[0])) from None
            if not Path(entry.root).exists():
                raise ConfigError(f"{key}.root", f"path does not exist: {entry.root}")
            if entry.minmax_bounds and not Path(entry.minmax_bounds).exists():
                raise ConfigError(f"{key}.minmax_bounds", f"path does not exist: {entry.minmax_bounds}")
        if self.data.prepared and not Path(self.data.prepared).exists():
            raise ConfigError("data.prepared", f"path does not exist: {self.data.prepared}")
        if self.mode == "cross_dataset":
            if self.data.cross_dataset is None or len(self.data.datasets) < 2:
                if self.data.prepared is None:
                    raise ConfigError("data", "cross_dataset mode needs data.cross_dataset and "
                                              "at least two data.datasets (or a prepared file)")
            if (self.data.cross_dataset is not None
                    and self.data.cross_dataset.vocabulary not in VOCABULARIES):
                raise ConfigError("data.cross_dataset.vocabulary",
                                  f"must be one of {sorted(VOCABULARIES)}")
        elif len(self.data.datasets) > 1:
            raise ConfigError("data.datasets", f"mode {self.mode} takes a single dataset")
        # surface value errors from the typed configs now, with their section name
        for key, make in (("model", self._probe_model), ("train", self.train_config),
                          ("data.synthetic", self.synthetic_config)):
            try:
                make()
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, str(exc)) from None

    def _probe_model(self) -> ModelConfig:
        """Build a ModelConfig with placeholder data-derived fields to type-check ``model``."""
        defaults = {f.name: f.default for f in fields(ModelConfig)}
        for k, v in self.model.items():
            d = defaults[k]
            numeric = isinstance(d, (int, float)) and not isinstance(d, bool)
            if (numeric and (isinstance(v, bool) or not isinstance(v, (int, float)))) or (
                    isinstance(d, bool) and not isinstance(v, bool)):
                raise ConfigError(f"model.{k}", f"expected {type(d).__name__}, got {v!r}")
        return ModelConfig(sensor_channels=[3], window_size=64, n_activities=2, n_domains=2,
                           **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train, seed=self.seed)

    def synthetic_config(self) -> SyntheticConfig | None:
        if self.data.synthetic is None:
            return None
        return SyntheticConfig(**self.data.synthetic, seed=self.seed)


def _model_keys() -> set[str]:
    return {f.name for f in fields(ModelConfig)} - set(_DERIVED_MODEL_FIELDS)


def _check_keys(d: dict, allowed: set[str], path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}", f"unknown key (allowed: {sorted(allowed)})")


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{path}.{k}".lstrip("."), "unknown key")
    kwargs = {}
    for name, f in known.items():
        key = f"{path}.{name}".lstrip(".")
        if name not in raw:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(key, "required key missing")
            continue
        value = raw[name]
        if cls is ExperimentConfig and name == "data":
            value = _build(DataConfig, value, key)
        elif cls is DataConfig and name == "datasets":
            if not isinstance(value, list):
                raise ConfigError(key, "expected a list")
            value = [_build(DatasetEntry, v, f"{key}.{i}") for i, v in enumerate(value)]
        elif cls is DataConfig and name == "cross_dataset" and value is not None:
            value = _build(CrossDatasetOptions, value, key)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for i, part in enumerate(parts[:-1]):
            if isinstance(node, list):
                node = node[int(part)]
                continue
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, (dict, list)):
                raise ConfigError(".".join(parts[: i + 1]), "is not a mapping")
        value = yaml.safe_load(text)
        if isinstance(node, list):
            node[int(parts[-1])] = value
        else:
            node[parts[-1]] = value
    return raw


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides or []))


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def _dataset_spec(entry: DatasetEntry) -> tuple[DatasetSpec, int, tuple[str, ...]]:
    info = get_adapter(entry.name)
    spec = info.spec
    bounds = load_minmax_bounds(entry.minmax_bounds) if entry.minmax_bounds else None
    spec = DatasetSpec(
        name=spec.name,
        window_size=entry.window_size or spec.window_size,
        step=entry.step or spec.step,
        normalization=entry.normalization or spec.normalization,
        target_rate=entry.target_rate or spec.target_rate,
        minmax_bounds=bounds,
    )
    return spec, info.n_activities, info.activity_names


def build_dataset(cfg: ExperimentConfig) -> WindowedDataset:
    d = cfg.data
    if d.prepared:
        return WindowedDataset.load(d.prepared)
    if d.synthetic is not None:
        return make_synthetic(cfg.synthetic_config())
    if cfg.mode == "cross_dataset" or d.cross_dataset is not None:
        opts = d.cross_dataset or CrossDatasetOptions()
        vocab = VOCABULARIES[opts.vocabulary]
        sources = []
        for entry in d.datasets:
            recs = get_adapter(entry.name).reader(entry.root)
            base = recs[0].dataset if recs else entry.name
            sources.append(cross_dataset_source(base, recs, vocab))
        return harmonize_cross_dataset(sources, len(vocab), opts.window_size, opts.step,
                                       opts.target_hz, opts.normalization, list(vocab))
    entry = d.datasets[0]
    spec, n_a, names = _dataset_spec(entry)
    recs = get_adapter(entry.name).reader(entry.root)
    if not recs:
        raise ConfigError("data.datasets.0.root", f"no recordings found under {entry.root}")
    return prepare(recs, spec, n_a, list(names))


# --------------------------------------------------------------------------
# Modes
# --------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def write_manifest(cfg: ExperimentConfig, out: Path, status: str, extra: dict | None = None) -> None:
    manifest = {
        "status": status,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "design": DESIGN_SWITCHES,
        "package_version": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        **(extra or {}),
    }
    _write_json(out / "manifest.json", manifest)


def _mode_prepare(cfg, out, workers) -> dict:
    ds = build_dataset(cfg)
    ds.save(out / "windows.npz")
    log.info("prepared %d windows from %d subjects", len(ds), ds.n_subjects)
    return {"windows": len(ds), "subjects": ds.n_subjects}


def _mode_train(cfg, out, workers) -> dict:
    ds = build_dataset(cfg)
    split = loso_splits(ds, cfg.data.test_subject)[0]
    tc = cfg.train_config()
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    result = train(ds.subset(split.train), ds.subset(split.val), tc,
                   log_path=out / "train_log.jsonl", checkpoint_dir=ckpt, **cfg.model)
    test = ds.subset(split.test)
    cm = confusion_matrix(test.y, predict(result.model, test.X), ds.n_activities)
    names = [ds.subject_ids[s] if ds.subject_ids else s for s in split.test_subjects]
    vals = [ds.subject_ids[s] if ds.subject_ids else s for s in split.val_subjects]
    fold = FoldResult.from_confusion(split.fold_id, tuple(names), tuple(vals), cm)
    report = SweepReport(cfg.method, [fold])
    write_results(report, out / "results")
    return {"failed_folds": 0, "best_val_macro_f1": result.best_val_f1}


def _sweep_mode(runner):
    def run(cfg, out, workers) -> dict:
        ds = build_dataset(cfg)
        report = runner(ds, cfg.train_config(), out_dir=out / "results", workers=workers,
                        method=cfg.method, model_overrides=cfg.model)
        if cfg.plots:
            write_tables({cfg.method: report.folds}, out / "results", plots=True)
        return {"folds": len(report.folds), "failed_folds": len(report.failed)}
    return run


def emit_report(results_dir, out_dir=None, plots: bool = False) -> list[Path]:
    """Regenerate tables (and optional plots) from stored fold results.

    Reads every ``folds.csv`` under ``results_dir``; raises ``FileNotFoundError``
    when there is none.
    """
    results_dir = Path(results_dir)
    csvs = sorted(results_dir.rglob("folds.csv"))
    if not csvs:
        raise FileNotFoundError(f"no fold results under {results_dir}")
    methods: dict[str, list[FoldResult]] = {}
    for path in csvs:
        for method, folds in read_results(path.parent).items():
            methods.setdefault(method, []).extend(folds)
    out_dir = Path(out_dir) if out_dir else results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    return write_tables(methods, out_dir, plots=plots)


def _mode_report(cfg, out, workers) -> dict:
    written = emit_report(out, out / "report", plots=cfg.plots)
    return {"written": [str(p) for p in written]}


MODE_RUNNERS = {
    "prepare": _mode_prepare,
    "train": _mode_train,
    "loso": _sweep_mode(run_loso),
    "cross_dataset": _sweep_mode(run_cross_dataset),
    "report": _mode_report,
}


def resolve_output(cfg: ExperimentConfig, out: str | None) -> Path:
    path = Path(out if out is not None else cfg.output_dir)
    if not path.is_absolute():
        path = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / path
    return path


def _error_report(kind: str, exc: BaseException, key: str | None = None) -> dict:
    report = {"error": kind, "message": str(exc)}
    if key:
        report["key"] = key
    return report


def run(config_path, overrides: list[str] | None = None, workers: int | None = None,
        out: str | None = None) -> int:
    """Execute one experiment; returns the process exit status.

    0 on success, 1 on a runtime failure, 2 on an invalid config and 3 when a
    sweep finished with failed folds.
    """
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        print(json.dumps(_error_report("config", exc, exc.key)), file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as exc:
        print(json.dumps(_error_report("config", exc)), file=sys.stderr)
        return 2
    out_dir = resolve_output(cfg, out)
    if cfg.mode == "report":
        try:
            summary = _mode_report(cfg, out_dir, 1)
        except FileNotFoundError as exc:
            print(json.dumps(_error_report("report", exc)), file=sys.stderr)
            return 1
        print(json.dumps(summary))
        return 0

    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    _write_json(out_dir / "config.json", cfg.to_dict())
    write_manifest(cfg, out_dir, "running")
    try:
        summary = MODE_RUNNERS[cfg.mode](cfg, out_dir, workers or cfg.workers)
    except Exception as exc:  # noqa: BLE001 - turned into a structured report
        report = _error_report("runtime", exc, getattr(exc, "key", None))
        report["traceback"] = traceback.format_exc(limit=5)
        write_manifest(cfg, out_dir, "failed", {"error": report})
        print(json.dumps({k: v for k, v in report.items() if k != "traceback"}), file=sys.stderr)
        return 1
    finally:
        log.removeHandler(handler)
        handler.close()
    status = "partial" if summary.get("failed_folds") else "complete"
    write_manifest(cfg, out_dir, status, {"summary": summary})
    print(json.dumps({"status": status, "output_dir": str(out_dir), **summary}, default=str))
    return 3 if status == "partial" else 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tasked", description=__doc__.split("\n")[0])
    parser.add_argument("config", help="YAML experiment config")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable (e.g. train.hyper.alpha=0.5)")
    parser.add_argument("--workers", type=int, default=None, help="concurrent folds")
    parser.add_argument("--out", default=None,
                        help=f"output directory (relative paths resolve against ${OUTPUT_ROOT_ENV})")
    args = parser.parse_args(argv)
    return run(args.config, args.override, args.workers, args.out)


if __name__ == "__main__":
    sys.exit(main())
