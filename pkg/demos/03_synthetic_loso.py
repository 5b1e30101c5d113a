# coding: utf-8

# # A small leave-one-subject-out sweep on synthetic data
#
# Four subjects, so eight folds (two validation choices per test subject).
# The epoch budget is tiny; the point is the shape of the outputs.

import sys
import tempfile
import warnings
from pathlib import Path

from tasked.data import SyntheticConfig, make_synthetic
from tasked.evaluation import run_loso
from tasked.losses import LossHyper
from tasked.training import TrainConfig

warnings.simplefilter("ignore")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3

ds = make_synthetic(SyntheticConfig(n_subjects=4, n_activities=4, windows_per_subject_per_activity=8,
                                    subject_effect=1.0, noise_std=0.3, seed=0))
print(len(ds), "windows,", ds.n_subjects, "subjects")

out = Path(tempfile.mkdtemp(prefix="tasked-demo-"))
for method, hyper in (("TASKED", LossHyper()),
                      ("no-adversary", LossHyper(lambda_mmd=0, lambda_d=0, alpha=0))):
    cfg = TrainConfig(batch_size=16, epochs=epochs, pretrain_epochs=epochs, patience=epochs,
                      lr_classifier=1e-3, lr_extractor=1e-3, hyper=hyper, seed=0)
    report = run_loso(ds, cfg, out_dir=out / method, method=method)
    print(method, {k: f"{100 * m:.1f} +- {100 * s:.1f}" for k, (m, s) in report.aggregate.items()})

print((out / "TASKED" / "table.txt").read_text())
print("fold results under", out)
