"""Objective terms: weighted CE + dice, self-distillation, subject CE and multi-kernel MMD."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import Tensor
from torch.nn import functional as F


@dataclass
class LossHyper:
    lambda_cls: float = 10.0
    lambda_mmd: float = 5.0
    lambda_d: float = 1.0
    alpha: float = 0.6
    tau: float = 20.0
    eps: float = 1e-6

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_mmd, self.lambda_d) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0 or self.eps <= 0:
            raise ValueError("tau and eps must be positive")


@dataclass
class LossBundle:
    activity: float = 0.0
    kd: float = 0.0
    cls: float = 0.0
    domain: float = 0.0
    mmd: float = 0.0
    objective: float = 0.0
    # signed L_D contribution to the scalar the extractor minimizes
    domain_term: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _one_hot(y: Tensor, n_classes: int, dtype) -> Tensor:
    if y.dim() == 1:
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError("label out of range")
        return F.one_hot(y.long(), n_classes).to(dtype)
    if y.shape[1] != n_classes:
        raise ValueError(f"one-hot labels have {y.shape[1]} classes, logits have {n_classes}")
    if not (((y == 0) | (y == 1)).all() and (y.sum(dim=1) == 1).all()):
        raise ValueError("y must be one-hot")
    return y.to(dtype)


def dice_term(probs: Tensor, y: Tensor, eps: float = 1e-6) -> Tensor:
    """Global soft dice loss over every sample and class; lies in [0, 1]."""
    return 1 - (2 * (probs * y).sum() + eps) / (probs.sum() + y.sum() + eps)


def activity_loss(logits: Tensor, y: Tensor, weights: Tensor | None = None,
                  eps: float = 1e-6) -> Tensor:
    """Half class-weighted cross-entropy (batch mean) plus half global dice loss.

    ``y`` is either one-hot ``(n, n_a)`` or integer labels ``(n,)``.
    """
    if logits.dim() != 2 or logits.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)}, y {tuple(y.shape)}")
    n_a = logits.shape[1]
    y = _one_hot(y, n_a, logits.dtype)
    if weights is None:
        weights = torch.ones(n_a, dtype=logits.dtype, device=logits.device)
    weights = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if weights.shape != (n_a,):
        raise ValueError(f"need {n_a} class weights, got shape {tuple(weights.shape)}")
    ce = -(weights * y * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    return 0.5 * ce + 0.5 * dice_term(torch.softmax(logits, dim=1), y, eps)


def softened_probs(logits: Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return torch.softmax(logits / tau, dim=-1)


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, tau: float) -> Tensor:
    """KL(teacher || student) of temperature-softened predictions, batch mean.

    The teacher side is detached.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits must have the same shape")
    p_t = softened_probs(teacher_logits.detach(), tau)
    log_p = F.log_softmax(student_logits / tau, dim=-1)
    kl = torch.special.xlogy(p_t, p_t) - p_t * log_p
    return kl.sum(dim=-1).mean()


def classification_loss(logits: Tensor, y: Tensor, teacher_logits: Tensor, hyper: LossHyper,
                        weights: Tensor | None = None) -> Tensor:
    a = hyper.alpha
    if a == 0:
        return activity_loss(logits, y, weights, hyper.eps)
    if a == 1:
        return kd_loss(logits, teacher_logits, hyper.tau)
    return ((1 - a) * activity_loss(logits, y, weights, hyper.eps)
            + a * kd_loss(logits, teacher_logits, hyper.tau))


def domain_loss(d_logits: Tensor, s: Tensor) -> Tensor:
    if s.numel() and (s.min() < 0 or s.max() >= d_logits.shape[1]):
        raise ValueError(f"subject label out of range for {d_logits.shape[1]} discriminator outputs")
    return F.cross_entropy(d_logits, s.long())


# --------------------------------------------------------------------------
# Multi-kernel MMD
# --------------------------------------------------------------------------

@dataclass
class KernelBank:
    """Convex combination of Gaussian kernels ``exp(-|a-b|^2 / (2 sigma^2))``."""

    bandwidths: tuple[float, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        self.bandwidths = tuple(float(s) for s in self.bandwidths)
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.weights is None:
            self.weights = tuple(1.0 / len(self.bandwidths) for _ in self.bandwidths)
        self.weights = tuple(float(b) for b in self.weights)
        if len(self.weights) != len(self.bandwidths):
            raise ValueError("need one weight per kernel")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1) > 1e-9:
            raise ValueError("kernel weights must be non-negative and sum to 1")

    def __len__(self) -> int:
        return len(self.bandwidths)

    @classmethod
    def from_median(cls, x: Tensor, factors: Sequence[float] = (0.25, 0.5, 1.0, 2.0, 4.0)
                    ) -> "KernelBank":
        """Bandwidths ``factor * median pairwise distance`` of the rows of ``x``."""
        with torch.no_grad():
            x = _flat(x).double()
            n = x.shape[0]
            if n < 2:
                return cls(tuple(float(f) for f in factors))
            d = torch.cdist(x, x)
            iu = torch.triu_indices(n, n, offset=1)
            med = d[iu[0], iu[1]].median().item()
        if not med > 0:
            med = 1.0
        return cls(tuple(f * med for f in factors))


def _flat(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1) if x.dim() != 2 else x


def squared_distances(a: Tensor, b: Tensor) -> Tensor:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)


def kernel_matrix(a: Tensor, b: Tensor, bank: KernelBank) -> Tensor:
    d2 = squared_distances(_flat(a), _flat(b))
    k = torch.zeros_like(d2)
    for sigma, beta in zip(bank.bandwidths, bank.weights):
        k = k + beta * torch.exp(-d2 / (2 * sigma ** 2))
    return k


def kernel_eval(a: Tensor, b: Tensor, bank: KernelBank) -> Tensor:
    return kernel_matrix(a.reshape(1, -1), b.reshape(1, -1), bank)[0, 0]


def mmd2(source: Tensor, target: Tensor, bank: KernelBank) -> Tensor:
    """Biased squared MMD between two embedding sets (rows are samples)."""
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("mmd2 needs at least one embedding on each side")
    return (kernel_matrix(source, source, bank).mean()
            + kernel_matrix(target, target, bank).mean()
            - 2 * kernel_matrix(source, target, bank).mean())


def mmd_regularizer(embeddings: Tensor, groups: Tensor, bank: KernelBank | None = None) -> Tensor:
    """Average pairwise squared MMD over the ``K`` groups present, ``1/K^2`` normalized.

    Diagonal pairs contribute zero. Bandwidths default to the median heuristic
    over the whole batch.
    """
    x = _flat(embeddings)
    labels, inverse = torch.unique(groups, return_inverse=True)
    k_groups = len(labels)
    if k_groups < 2:
        warnings.warn("fewer than two subject groups in batch; MMD regularizer is 0", RuntimeWarning,
                      stacklevel=2)
        return x.sum() * 0
    if bank is None:
        bank = KernelBank.from_median(x)
    gram = kernel_matrix(x, x, bank)
    member = F.one_hot(inverse, k_groups).to(x.dtype)
    member = member / member.sum(dim=0, keepdim=True)
    mean_k = member.T @ gram @ member  # mean kernel value between groups i and j
    total = 2 * k_groups * torch.diagonal(mean_k).sum() - 2 * mean_k.sum()
    return total / k_groups ** 2


def objective(cls: Tensor, mmd: Tensor, domain: Tensor, hyper: LossHyper
              ) -> tuple[Tensor, Tensor, Tensor]:
    """Per-network objectives: (extractor, classifier, discriminator).

    The extractor ascends the domain loss that the discriminator descends.
    """
    extractor = hyper.lambda_cls * cls + hyper.lambda_mmd * mmd - hyper.lambda_d * domain
    return extractor, cls, domain
