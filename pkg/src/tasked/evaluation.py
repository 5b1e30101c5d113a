"""Metrics, leave-one-subject-out sweeps and result tables."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Split, WindowedDataset, cross_dataset_splits, loso_sweep
from .model import SubjectDiscriminator
from .training import TrainConfig, embed, predict, train

log = logging.getLogger(__name__)

METRICS = ("acc", "f_w", "f_m")


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have the same length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def metrics(cm) -> tuple[float, float, float]:
    """Accuracy, support-weighted F1 and macro F1 of a confusion matrix.

    A class whose precision and recall are both zero contributes F1 = 0.
    """
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total <= 0:
        raise ValueError("metrics need a non-empty square confusion matrix")
    f1 = per_class_f1(cm)
    support = cm.sum(axis=1) / total
    return float(np.trace(cm) / total), float(support @ f1), float(f1.mean())


@dataclass
class FoldResult:
    fold_id: str
    test_subjects: tuple
    val_subjects: tuple
    confusion: np.ndarray | None = None
    acc: float = float("nan")
    f_w: float = float("nan")
    f_m: float = float("nan")
    status: str = "ok"
    error: str = ""
    history: list = field(default_factory=list)

    @classmethod
    def from_confusion(cls, fold_id, test_subjects, val_subjects, cm, **kw) -> "FoldResult":
        acc, f_w, f_m = metrics(cm)
        return cls(fold_id, tuple(test_subjects), tuple(val_subjects), np.asarray(cm), acc, f_w,
                   f_m, **kw)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def aggregate(folds: list[FoldResult], by: str = "fold") -> dict[str, tuple[float, float]]:
    """Mean and population std of each metric over successful folds.

    ``by="test_subject"`` first averages the folds sharing a test set.
    """
    good = [f for f in folds if f.ok]
    if not good:
        return {m: (float("nan"), float("nan")) for m in METRICS}
    if by == "fold":
        rows = [[getattr(f, m) for m in METRICS] for f in good]
    elif by == "test_subject":
        groups: dict = {}
        for f in good:
            groups.setdefault(f.test_subjects, []).append([getattr(f, m) for m in METRICS])
        rows = [np.mean(v, axis=0) for v in groups.values()]
    else:
        raise ValueError(f"unknown aggregation {by!r}")
    rows = np.asarray(rows, dtype=np.float64)
    return {m: (float(rows[:, i].mean()), float(rows[:, i].std())) for i, m in enumerate(METRICS)}


@dataclass
class SweepReport:
    method: str
    folds: list[FoldResult]

    @property
    def aggregate(self) -> dict[str, tuple[float, float]]:
        return aggregate(self.folds)

    @property
    def failed(self) -> list[FoldResult]:
        return [f for f in self.folds if not f.ok]


def fold_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(root_seed, spawn_key=(index,)).generate_state(1)[0])


def _subject_names(ds: WindowedDataset, subjects) -> tuple:
    if not ds.subject_ids:
        return tuple(int(s) for s in subjects)
    return tuple(ds.subject_ids[s] for s in subjects)


def run_fold(ds: WindowedDataset, split: Split, config: TrainConfig, seed: int,
             fold_dir: Path | None = None, model_overrides: dict | None = None) -> FoldResult:
    """Train on one split and score the best-validation model on its test subjects."""
    test_names = _subject_names(ds, split.test_subjects)
    val_names = _subject_names(ds, split.val_subjects)
    cfg = replace(config, seed=seed)
    target = ds.subset(split.test) if cfg.use_target_unlabeled else None
    log_path = ckpt = None
    if fold_dir is not None:
        fold_dir.mkdir(parents=True, exist_ok=True)
        log_path, ckpt = fold_dir / "train_log.jsonl", fold_dir
        if log_path.exists():
            log_path.unlink()
    try:
        result = train(ds.subset(split.train), ds.subset(split.val), cfg, target_ds=target,
                       log_path=log_path, checkpoint_dir=ckpt, **(model_overrides or {}))
        test = ds.subset(split.test)
        cm = confusion_matrix(test.y, predict(result.model, test.X), ds.n_activities)
        return FoldResult.from_confusion(split.fold_id, test_names, val_names, cm,
                                         history=result.history)
    except Exception as exc:  # noqa: BLE001 - a failed fold must not stop the sweep
        log.error("fold %s failed: %s", split.fold_id, exc)
        diagnostics = getattr(exc, "diagnostics", None)
        return FoldResult(split.fold_id, test_names, val_names, status="failed",
                          error=f"{type(exc).__name__}: {exc}"
                                + (f" {json.dumps(diagnostics)}" if diagnostics else "")
                                + "\n" + traceback.format_exc(limit=3))


def _sweep(ds, splits, config, out_dir, workers, method, model_overrides) -> SweepReport:
    out_dir = Path(out_dir) if out_dir is not None else None
    jobs = [(ds, split, config, fold_seed(config.seed, i),
             None if out_dir is None else out_dir / "folds" / split.fold_id, model_overrides)
            for i, split in enumerate(splits)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(_run_fold_job, jobs))
    else:
        folds = [run_fold(*job) for job in jobs]
    report = SweepReport(method, folds)
    if out_dir is not None:
        write_results(report, out_dir)
    return report


def _run_fold_job(job) -> FoldResult:
    return run_fold(*job)


def run_loso(ds: WindowedDataset, config: TrainConfig, out_dir=None, workers: int = 1,
             method: str = "TASKED", model_overrides: dict | None = None) -> SweepReport:
    """Two folds per test subject (one per validation subject), every subject tested."""
    return _sweep(ds, loso_sweep(ds), config, out_dir, workers, method, model_overrides)


def run_cross_dataset(ds: WindowedDataset, config: TrainConfig, out_dir=None, workers: int = 1,
                      method: str = "TASKED", model_overrides: dict | None = None) -> SweepReport:
    """Folds holding out one subject from every merged dataset simultaneously."""
    return _sweep(ds, cross_dataset_splits(ds), config, out_dir, workers, method, model_overrides)


def _probe_halves(subjects: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    fit_idx, test_idx = [], []
    for s in np.unique(subjects):
        idx = rng.permutation(np.flatnonzero(subjects == s))
        fit_idx.append(idx[: len(idx) // 2])
        test_idx.append(idx[len(idx) // 2:])
    return np.concatenate(fit_idx), np.concatenate(test_idx)


def subject_probe_accuracy(model, ds: WindowedDataset, epochs: int = 20, seeds: int = 3,
                           batch_size: int = 16, lr: float = 1e-3) -> float:
    """Held-out accuracy of a freshly trained subject discriminator on frozen embeddings.

    The probe has the discriminator's architecture and sees the full
    ``(channels, W/8)`` embedding. Windows are split in half per subject; the
    probe is fit with Adam for a fixed number of epochs on one half and scored
    on the other. The result is averaged over ``seeds`` probe initializations
    and splits. The score depends on the epoch budget, so compare models only
    at equal budgets.
    """
    model.eval()
    with torch.no_grad():
        X = torch.as_tensor(ds.X, dtype=torch.float32)
        E = torch.cat([model.extractor(X[i:i + 512]) for i in range(0, len(X), 512)])
    subjects, s = np.unique(ds.subjects, return_inverse=True)
    target = torch.as_tensor(s)
    cfg = replace(model.config, n_domains=len(subjects))
    scores = []
    for seed in range(seeds):
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        fit_idx, test_idx = _probe_halves(s, rng)
        probe = SubjectDiscriminator(cfg)
        opt = torch.optim.Adam(probe.parameters(), lr=lr)
        n_batches = max(1, len(fit_idx) // batch_size)
        for _ in range(epochs):
            probe.train()
            for b in np.array_split(rng.permutation(fit_idx), n_batches):
                loss = F.cross_entropy(probe(E[b]), target[b])
                opt.zero_grad()
                loss.backward()
                opt.step()
        probe.eval()
        with torch.no_grad():
            pred = probe(E[test_idx]).argmax(dim=1)
        scores.append(float((pred == target[test_idx]).float().mean()))
    return float(np.mean(scores))


def linear_probe_accuracy(model, ds: WindowedDataset, seed: int = 0) -> float:
    """Held-out accuracy of a logistic-regression subject probe on time-pooled embeddings.

    The L2 strength is picked by 3-fold cross-validation on the fitting half,
    since the embedding has more dimensions than a small split has windows.
    """
    from sklearn.linear_model import LogisticRegressionCV
    from sklearn.preprocessing import StandardScaler

    feats = embed(model, ds.X)
    fit_idx, test_idx = _probe_halves(ds.subjects, np.random.default_rng(seed))
    scaler = StandardScaler().fit(feats[fit_idx])
    probe = LogisticRegressionCV(Cs=np.logspace(-4, 2, 7), cv=3, max_iter=5000)
    probe.fit(scaler.transform(feats[fit_idx]), ds.subjects[fit_idx])
    return float(probe.score(scaler.transform(feats[test_idx]), ds.subjects[test_idx]))


# --------------------------------------------------------------------------
# Result files
# --------------------------------------------------------------------------

def _fmt(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def write_results(report: SweepReport, out_dir) -> None:
    """Write ``folds.csv``, ``confusion/<fold>.json``, ``summary.csv`` and ``table.txt``."""
    out_dir = Path(out_dir)
    (out_dir / "confusion").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "folds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "fold", "test_subjects", "val_subjects", *METRICS, "status", "error"])
        for f in report.folds:
            w.writerow([report.method, f.fold_id, json.dumps(_plain(f.test_subjects)),
                        json.dumps(_plain(f.val_subjects)),
                        *(repr(getattr(f, m)) for m in METRICS), f.status,
                        f.error.splitlines()[0] if f.error else ""])
            if f.confusion is not None:
                (out_dir / "confusion" / f"{f.fold_id}.json").write_text(
                    json.dumps({"fold": f.fold_id, "matrix": f.confusion.tolist()}))
    write_tables({report.method: report.folds}, out_dir)


def _plain(value):
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def read_results(out_dir) -> dict[str, list[FoldResult]]:
    """Load ``folds.csv`` (+ confusion matrices) grouped by method.

    Rows with unreadable metrics or a corrupt confusion file are returned as
    failed folds whose ``error`` says what was wrong.
    """
    out_dir = Path(out_dir)
    path = out_dir / "folds.csv"
    if not path.exists():
        raise FileNotFoundError(f"no folds.csv in {out_dir}")
    methods: dict[str, list[FoldResult]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                fold = FoldResult(row["fold"], tuple(_tuplify(json.loads(row["test_subjects"]))),
                                  tuple(_tuplify(json.loads(row["val_subjects"]))),
                                  acc=float(row["acc"]), f_w=float(row["f_w"]),
                                  f_m=float(row["f_m"]), status=row["status"], error=row["error"])
                cm_path = out_dir / "confusion" / f"{row['fold']}.json"
                if fold.ok:
                    cm = np.asarray(json.loads(cm_path.read_text())["matrix"])
                    recomputed = metrics(cm)
                    if not np.allclose(recomputed, (fold.acc, fold.f_w, fold.f_m), atol=1e-12):
                        raise ValueError("stored metrics disagree with confusion matrix")
                    fold.confusion = cm
            except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
                fold = FoldResult(row.get("fold", "?"), (), (), status="corrupt", error=str(exc))
            methods.setdefault(row.get("method", "?"), []).append(fold)
    return methods


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def write_tables(methods: dict[str, list[FoldResult]], out_dir, plots: bool = False) -> list[Path]:
    """Summary CSV (mean/std per metric) and a text table in ``mean ± std`` percent."""
    out_dir = Path(out_dir)
    rows = []
    for method, folds in methods.items():
        by_fold, by_subject = aggregate(folds), aggregate(folds, by="test_subject")
        n_ok = sum(f.ok for f in folds)
        rows.append((method, n_ok, len(folds), by_fold, by_subject))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "folds_ok", "folds_total"]
                   + [f"{m}_{k}" for m in METRICS for k in ("mean", "std")]
                   + [f"{m}_std_by_test_subject" for m in METRICS])
        for method, n_ok, n, agg, agg_s in rows:
            w.writerow([method, n_ok, n] + [repr(v) for m in METRICS for v in agg[m]]
                       + [repr(agg_s[m][1]) for m in METRICS])
    lines = [f"{'Method':<16}{'acc':>18}{'F_w':>18}{'F_m':>18}   folds"]
    for method, n_ok, n, agg, _ in rows:
        cells = "".join(f"{_fmt(*agg[m]):>18}" for m in METRICS)
        flag = "" if n_ok == n else f"  ({n - n_ok} failed)"
        lines.append(f"{method:<16}{cells}   {n_ok}/{n}{flag}")
    (out_dir / "table.txt").write_text("\n".join(lines) + "\n")
    written = [out_dir / "summary.csv", out_dir / "table.txt"]
    if plots:
        written += plot_distributions(methods, out_dir)
    return written


def plot_distributions(methods: dict[str, list[FoldResult]], out_dir) -> list[Path]:
    """Box plots of per-fold metrics, one panel per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.5))
    for ax, m in zip(axes, METRICS):
        data = [[100 * getattr(f, m) for f in folds if f.ok] for folds in methods.values()]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(methods) + 1), list(methods), rotation=30)
        ax.set_title(m)
    fig.tight_layout()
    path = Path(out_dir) / "metrics_boxplot.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [path]
