"""Two-phase training: multi-task pre-training, then adversarial training with MMD and self-distillation."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import WindowedDataset
from .losses import (
    LossBundle,
    LossHyper,
    activity_loss,
    classification_loss,
    domain_loss,
    kd_loss,
    mmd_regularizer,
    objective,
)
from .model import ModelConfig, TaskedModel, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    pretrain_epochs: int | None = None
    patience: int = 20
    lr_classifier: float = 1e-4
    lr_extractor: float = 1e-4
    lr_discriminator: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    hyper: LossHyper = field(default_factory=LossHyper)
    use_target_unlabeled: bool = False
    class_weighting: str = "inverse_frequency"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = LossHyper(**self.hyper)
        self.betas = tuple(self.betas)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs two samples)")
        if self.epochs < 1 or (self.pretrain_epochs is not None and self.pretrain_epochs < 1):
            raise ValueError("epochs must be positive")
        if not 0 <= self.patience <= self.epochs:
            raise ValueError("patience must lie in [0, epochs]")
        if min(self.lr_classifier, self.lr_extractor, self.lr_discriminator) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.class_weighting not in ("inverse_frequency", "none"):
            raise ValueError("class_weighting must be 'inverse_frequency' or 'none'")

    @property
    def phase1_epochs(self) -> int:
        return self.pretrain_epochs if self.pretrain_epochs is not None else self.epochs


def class_weights(labels, n_classes: int | None = None) -> np.ndarray:
    """Inverse-frequency class weights ``n / (n_a * n_i)`` rescaled to mean 1.

    Classes absent from ``labels`` get weight 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot compute class weights from an empty label set")
    n_a = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=n_a).astype(np.float64)
    if n_a == 1 or np.count_nonzero(counts) == 1:
        warnings.warn("only one class present; class weighting is degenerate", RuntimeWarning,
                      stacklevel=2)
    if np.any(counts == 0):
        warnings.warn(f"classes {np.flatnonzero(counts == 0).tolist()} absent; weight set to 0",
                      RuntimeWarning, stacklevel=2)
    w = np.zeros(n_a)
    present = counts > 0
    w[present] = labels.size / (n_a * counts[present])
    return w / w.mean()


def stratified_batches(subjects: np.ndarray, batch_size: int, rng: np.random.Generator
                       ) -> list[np.ndarray]:
    """Shuffle within subjects, spread each subject evenly over the epoch, then chunk.

    The ``i``-th of a subject's ``n`` windows is placed at ``(i + u) / n`` with
    a random offset ``u``, so every subject's windows are evenly spaced and
    batches mix subjects unless one subject holds nearly all windows. A
    trailing batch of a single window is folded into the previous batch.
    """
    keys, order = [], []
    for s in np.unique(subjects):
        idx = rng.permutation(np.flatnonzero(subjects == s))
        keys.append((np.arange(len(idx)) + rng.random()) / len(idx))
        order.append(idx)
    if order:
        keys, order = np.concatenate(keys), np.concatenate(order)
        order = order[np.argsort(keys, kind="stable")].astype(np.int64)
    else:
        order = np.zeros(0, dtype=np.int64)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


@dataclass
class TrainState:
    model: TaskedModel
    config: TrainConfig
    weights: Tensor
    optimizers: dict = field(default_factory=dict)
    teacher: TaskedModel | None = None
    phase: int = 1
    epoch: int = 0
    best_score: float = -math.inf
    best_epoch: int = -1
    best_state: dict | None = None
    history: list = field(default_factory=list)

    def reset_optimizers(self) -> None:
        cfg = self.config
        rates = {"extractor": cfg.lr_extractor, "classifier": cfg.lr_classifier,
                 "discriminator": cfg.lr_discriminator}
        self.optimizers = {
            name: torch.optim.Adam(self.model.params(name), lr=lr, betas=cfg.betas)
            for name, lr in rates.items()
        }

    def begin_adversarial_phase(self) -> None:
        """Freeze a copy of the current model as teacher and start phase 2."""
        teacher = copy.deepcopy(self.model)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        self.teacher = teacher
        self.phase = 2
        self.best_score, self.best_epoch, self.best_state = -math.inf, -1, None
        self.reset_optimizers()


def new_state(model: TaskedModel, config: TrainConfig, train_labels=None) -> TrainState:
    n_a = model.config.n_activities
    if config.class_weighting == "inverse_frequency" and train_labels is not None:
        w = class_weights(train_labels, n_a)
    else:
        w = np.ones(n_a)
    state = TrainState(model=model, config=config, weights=torch.tensor(w, dtype=torch.float32))
    state.reset_optimizers()
    return state


def _check_finite(bundle_values: dict, phase: int) -> None:
    bad = {k: v for k, v in bundle_values.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss in phase {phase}: {bad}",
                                 {"phase": phase, **bundle_values})


def _update(state: TrainState, name: str, loss: Tensor) -> None:
    opt = state.optimizers[name]
    opt.zero_grad(set_to_none=True)
    # only this network's parameters may receive a gradient step
    for other in state.optimizers:
        if other != name:
            state.optimizers[other].zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def pretrain_step(state: TrainState, x: Tensor, y: Tensor, s: Tensor) -> LossBundle:
    """Phase-1 step: classifier on L_act, discriminator on L_D, extractor on L_act + L_D."""
    if state.phase != 1:
        raise RuntimeError("pretrain_step called outside phase 1")
    m = state.model
    m.train()
    with torch.no_grad():
        e = m.extractor(x)

    l_act = activity_loss(m.classifier(e), y, state.weights)
    _check_finite({"activity": l_act.item()}, 1)
    _update(state, "classifier", l_act)

    l_d = domain_loss(m.discriminator(e), s)
    _check_finite({"domain": l_d.item()}, 1)
    _update(state, "discriminator", l_d)

    e = m.extractor(x)
    l_act = activity_loss(m.classifier(e), y, state.weights)
    l_d = domain_loss(m.discriminator(e), s)
    total = l_act + l_d
    bundle = LossBundle(activity=l_act.item(), cls=l_act.item(), domain=l_d.item(),
                        objective=total.item(), domain_term=l_d.item())
    _check_finite(bundle.as_dict(), 1)
    _update(state, "extractor", total)
    return bundle


def adversarial_step(state: TrainState, x: Tensor, y: Tensor, s: Tensor,
                     target: tuple[Tensor, Tensor] | None = None) -> LossBundle:
    """Phase-2 step.

    Updates, in order: discriminator on L_D; classifier on the distilled
    classification loss; extractor on ``lambda_cls*L_cls + lambda_MMD*L_MMD -
    lambda_D*L_D``. With unlabeled target windows, the discriminator and then
    the extractor (on ``L_MMD - L_D``) are updated again on the joined batch.
    """
    cfg, hyper = state.config, state.config.hyper
    if state.phase != 2 or state.teacher is None:
        raise RuntimeError("adversarial_step needs phase 2 and a teacher snapshot")
    if target is not None and not cfg.use_target_unlabeled:
        raise ValueError("target batch given but use_target_unlabeled is off")
    m = state.model
    m.train()
    with torch.no_grad():
        teacher_logits = state.teacher.classifier(state.teacher.extractor(x))
        e = m.extractor(x)

    l_d = domain_loss(m.discriminator(e), s)
    _check_finite({"domain": l_d.item()}, 2)
    _update(state, "discriminator", l_d)

    l_cls = classification_loss(m.classifier(e), y, teacher_logits, hyper, state.weights)
    _check_finite({"cls": l_cls.item()}, 2)
    _update(state, "classifier", l_cls)

    e = m.extractor(x)
    logits = m.classifier(e)
    l_act = activity_loss(logits, y, state.weights, hyper.eps)
    l_kd = kd_loss(logits, teacher_logits, hyper.tau)
    l_cls = (1 - hyper.alpha) * l_act + hyper.alpha * l_kd
    l_mmd = mmd_regularizer(e.mean(dim=-1), s) if hyper.lambda_mmd > 0 else e.sum() * 0
    l_d = domain_loss(m.discriminator(e), s)
    obj_e, _, _ = objective(l_cls, l_mmd, l_d, hyper)
    bundle = LossBundle(activity=l_act.item(), kd=l_kd.item(), cls=l_cls.item(),
                        domain=l_d.item(), mmd=l_mmd.item(), objective=obj_e.item(),
                        domain_term=-hyper.lambda_d * l_d.item())
    _check_finite(bundle.as_dict(), 2)
    _update(state, "extractor", obj_e)

    if target is not None:
        x_t, s_t = target
        xx, ss = torch.cat([x, x_t]), torch.cat([s, s_t])
        with torch.no_grad():
            e = m.extractor(xx)
        l_d2 = domain_loss(m.discriminator(e), ss)
        _check_finite({"domain_joint": l_d2.item()}, 2)
        _update(state, "discriminator", l_d2)
        e = m.extractor(xx)
        l_mmd2 = mmd_regularizer(e.mean(dim=-1), ss)
        l_d2 = domain_loss(m.discriminator(e), ss)
        joint = l_mmd2 - l_d2
        _check_finite({"joint": joint.item()}, 2)
        _update(state, "extractor", joint)
    return bundle


@torch.no_grad()
def predict(model: TaskedModel, X, batch_size: int = 512) -> np.ndarray:
    model.eval()
    X = torch.as_tensor(X, dtype=torch.float32)
    out = [model.classifier(model.extractor(X[i:i + batch_size])).argmax(dim=1)
           for i in range(0, len(X), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


@torch.no_grad()
def embed(model: TaskedModel, X, batch_size: int = 512) -> np.ndarray:
    """Time-pooled embeddings ``(n, channels)`` in eval mode."""
    model.eval()
    X = torch.as_tensor(X, dtype=torch.float32)
    out = [model.extractor(X[i:i + batch_size]).mean(dim=-1) for i in range(0, len(X), batch_size)]
    return torch.cat(out).numpy()


class DomainIndex:
    """Maps dataset subject labels to discriminator classes: training subjects
    ``0..N-1`` in ascending order, any unlabeled target subject(s) to ``N``."""

    def __init__(self, train_subjects):
        self.subjects = [int(s) for s in np.unique(train_subjects)]
        self.lookup = {s: i for i, s in enumerate(self.subjects)}

    @property
    def n_domains(self) -> int:
        return len(self.subjects) + 1

    def __call__(self, subjects, target: bool = False) -> np.ndarray:
        if target:
            return np.full(len(subjects), len(self.subjects), dtype=np.int64)
        return np.array([self.lookup[int(s)] for s in subjects], dtype=np.int64)


@dataclass
class TrainResult:
    model: TaskedModel
    teacher: TaskedModel
    history: list
    best_val_f1: float
    pretrained: dict


def _macro_f1(y_true, y_pred, n_classes: int) -> float:
    from .evaluation import confusion_matrix, metrics  # evaluation imports this module

    return metrics(confusion_matrix(y_true, y_pred, n_classes))[2]


def _run_phase(state: TrainState, train_ds: WindowedDataset, domains: np.ndarray,
               val_ds: WindowedDataset, epochs: int, rng: np.random.Generator,
               target: tuple[np.ndarray, np.ndarray] | None, log_file) -> None:
    cfg = state.config
    X = torch.as_tensor(train_ds.X)
    y = torch.as_tensor(train_ds.y)
    s = torch.as_tensor(domains)
    n_a = state.model.config.n_activities
    for epoch in range(epochs):
        state.epoch = epoch
        bundles = []
        for idx in stratified_batches(train_ds.subjects, cfg.batch_size, rng):
            idx = torch.as_tensor(idx)
            if state.phase == 1:
                bundles.append(pretrain_step(state, X[idx], y[idx], s[idx]))
            else:
                tgt = None
                if target is not None:
                    pick = rng.choice(len(target[0]), size=min(len(idx), len(target[0])),
                                      replace=False)
                    tgt = (torch.as_tensor(target[0][pick]), torch.as_tensor(target[1][pick]))
                bundles.append(adversarial_step(state, X[idx], y[idx], s[idx], tgt))
        val_f1 = _macro_f1(val_ds.y, predict(state.model, val_ds.X), n_a)
        record = {"phase": state.phase, "epoch": epoch, "val_macro_f1": val_f1,
                  **{k: float(np.mean([getattr(b, k) for b in bundles])) for k in
                     LossBundle.__dataclass_fields__}}
        state.history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        log.debug("phase %d epoch %d: %s", state.phase, epoch, record)
        if val_f1 > state.best_score:
            state.best_score, state.best_epoch = val_f1, epoch
            state.best_state = copy.deepcopy(state.model.state_dict())
        if epoch - state.best_epoch >= cfg.patience:
            break
    state.model.load_state_dict(state.best_state)


def train(train_ds: WindowedDataset, val_ds: WindowedDataset, config: TrainConfig,
          model_config: ModelConfig | None = None, target_ds: WindowedDataset | None = None,
          log_path: str | Path | None = None, checkpoint_dir: str | Path | None = None,
          **model_overrides) -> TrainResult:
    """Train a fresh model on ``train_ds`` with early stopping on ``val_ds`` macro-F1.

    Phase 1 runs multi-task pre-training; its best checkpoint becomes the frozen
    teacher and the starting point of phase 2. Returns the best phase-2 model.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if target_ds is not None and not config.use_target_unlabeled:
        raise ValueError("target data given but use_target_unlabeled is off")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    domains = DomainIndex(train_ds.subjects)
    if model_config is None:
        model_config = ModelConfig(
            sensor_channels=train_ds.sensor_channels,
            window_size=train_ds.window_size,
            n_activities=train_ds.n_activities,
            n_domains=domains.n_domains,
            **model_overrides,
        )
    elif model_config.n_domains < domains.n_domains:
        raise ValueError(f"model has {model_config.n_domains} discriminator outputs, "
                         f"need {domains.n_domains}")
    model = TaskedModel(model_config)
    state = new_state(model, config, train_ds.y)
    target = None
    if target_ds is not None:
        target = (target_ds.X, domains(target_ds.subjects, target=True))

    log_file = open(log_path, "a") if log_path is not None else None
    try:
        _run_phase(state, train_ds, domains(train_ds.subjects), val_ds, config.phase1_epochs,
                   rng, None, log_file)
        pretrained = copy.deepcopy(state.model.state_dict())
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / "pretrained.npz", {"phase": 1})
        state.begin_adversarial_phase()
        _run_phase(state, train_ds, domains(train_ds.subjects), val_ds, config.epochs, rng,
                   target, log_file)
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / "best.npz",
                            {"phase": 2, "val_macro_f1": state.best_score})
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model=state.model, teacher=state.teacher, history=state.history,
                       best_val_f1=state.best_score, pretrained=pretrained)


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d

