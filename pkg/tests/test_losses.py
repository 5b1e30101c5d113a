import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tasked.losses import (KernelBank, LossHyper, activity_loss, classification_loss, dice_term,
                           domain_loss, kd_loss, kernel_eval, mmd2, mmd_regularizer, objective,
                           softened_probs)

D = torch.float64
SINGLE = KernelBank((math.sqrt(0.5),))  # 2 sigma^2 = 1


def t(x):
    return torch.tensor(x, dtype=D)


def logits_for(p):
    return torch.log(t(p))


def test_activity_loss_two_class_example():
    # CE = ln 2, dice = 1 - 2*0.5 / (1 + 1) = 0.5 with plain sums over the batch
    value = activity_loss(logits_for([[0.5, 0.5]]), t([[1.0, 0.0]]), t([1.0, 1.0]), eps=1e-12)
    assert value.item() == pytest.approx(0.5 * math.log(2) + 0.5 * 0.5, abs=1e-9)
    assert value.item() == pytest.approx(0.5966, abs=1e-4)


def test_activity_loss_zero_at_perfect_prediction():
    logits = t([[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]])
    assert activity_loss(logits, torch.tensor([0, 2])).item() == pytest.approx(0, abs=1e-12)


def test_doubling_weights_doubles_only_ce():
    logits, y = torch.randn(6, 4, dtype=D), torch.randint(0, 4, (6,))
    w = t([0.5, 1.0, 2.0, 1.5])
    dice = 0.5 * dice_term(torch.softmax(logits, 1), torch.nn.functional.one_hot(y, 4).to(D))
    ce1 = activity_loss(logits, y, w) - dice
    ce2 = activity_loss(logits, y, 2 * w) - dice
    assert ce2.item() == pytest.approx(2 * ce1.item(), rel=1e-12)


def test_activity_loss_input_errors():
    with pytest.raises(ValueError, match="shape"):
        activity_loss(torch.zeros(3, 2), torch.zeros(2, dtype=torch.long))
    with pytest.raises(ValueError, match="one-hot"):
        activity_loss(torch.zeros(2, 2), torch.tensor([[1.0, 1.0], [0.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-20, 20)), st.lists(st.integers(0, 2), min_size=5, max_size=5))
def test_dice_term_bounded(logits, labels):
    y = torch.nn.functional.one_hot(torch.tensor(labels), 3).to(D)
    d = dice_term(torch.softmax(t(logits), 1), y).item()
    assert -1e-12 <= d <= 1 + 1e-12


def test_softened_probs_examples():
    assert softened_probs(t([2.0, 0.0]), 2.0).numpy() == pytest.approx([0.7311, 0.2689], abs=1e-4)
    x = torch.randn(4, 5, dtype=D)
    assert torch.allclose(softened_probs(x, 1.0), torch.softmax(x, -1))
    assert torch.allclose(softened_probs(x, 1e6), torch.full_like(x, 0.2), atol=1e-6)
    with pytest.raises(ValueError):
        softened_probs(x, 0.0)


def test_kd_example():
    value = kd_loss(logits_for([[0.5, 0.5]]), logits_for([[0.9, 0.1]]), tau=1.0)
    assert value.item() == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-12)
    assert value.item() == pytest.approx(0.3681, abs=1e-4)


def test_kd_teacher_gets_no_gradient():
    student = torch.randn(3, 4, dtype=D, requires_grad=True)
    teacher = torch.randn(3, 4, dtype=D, requires_grad=True)
    kd_loss(student, teacher, 2.0).backward()
    assert teacher.grad is None and student.grad is not None


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)),
       arrays(np.float64, (4, 3), elements=st.floats(-30, 30)), st.floats(0.1, 50))
def test_kd_nonnegative_and_zero_on_equal(a, b, tau):
    assert kd_loss(t(a), t(b), tau).item() >= -1e-12
    assert kd_loss(t(a), t(a), tau).item() == pytest.approx(0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_classification_loss_affine_in_alpha(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    logits, teacher = torch.randn(5, 3, generator=g, dtype=D), torch.randn(5, 3, generator=g, dtype=D)
    y = torch.randint(0, 3, (5,), generator=g)
    at = lambda a: classification_loss(logits, y, teacher, LossHyper(alpha=a)).item()  # noqa: E731
    assert at(alpha) == pytest.approx((1 - alpha) * at(0) + alpha * at(1), abs=1e-12)


def test_classification_loss_endpoints():
    logits, teacher, y = torch.randn(5, 3, dtype=D), torch.randn(5, 3, dtype=D), torch.randint(0, 3, (5,))
    assert torch.equal(classification_loss(logits, y, teacher, LossHyper(alpha=0)),
                       activity_loss(logits, y))
    assert torch.equal(classification_loss(logits, y, teacher, LossHyper(alpha=1)),
                       kd_loss(logits, teacher, 20.0))


def test_domain_loss_examples():
    s = torch.tensor([0, 1, 2, 3])
    assert domain_loss(torch.zeros(4, 4, dtype=D), s).item() == pytest.approx(math.log(4), abs=1e-12)
    perfect = torch.eye(4, dtype=D) * 100
    assert domain_loss(perfect, s).item() == pytest.approx(0, abs=1e-12)
    logits = torch.randn(4, 4, dtype=D)
    perm = torch.randperm(4)
    assert domain_loss(logits[perm], s[perm]).item() == pytest.approx(domain_loss(logits, s).item())
    with pytest.raises(ValueError, match="range"):
        domain_loss(logits, torch.tensor([0, 1, 2, 4]))


def test_kernel_examples():
    a, b = torch.randn(7, dtype=D), torch.randn(7, dtype=D)
    bank = KernelBank((0.5, 1.0, 3.0))
    assert kernel_eval(a, a, bank).item() == pytest.approx(1.0)
    assert kernel_eval(a, b, bank).item() == pytest.approx(kernel_eval(b, a, bank).item())
    assert 0 < kernel_eval(a, b, bank).item() <= 1
    assert kernel_eval(t([0.0]), t([1.0]), SINGLE).item() == pytest.approx(math.exp(-1))


def test_kernel_bank_validation():
    with pytest.raises(ValueError):
        KernelBank((1.0, -1.0))
    with pytest.raises(ValueError):
        KernelBank((1.0, 2.0), (0.7, 0.7))
    assert KernelBank((1.0, 2.0, 3.0, 4.0, 5.0)).weights == (0.2,) * 5


def test_median_bank_ladder():
    x = t([[0.0], [1.0], [3.0]])  # pairwise distances 1, 2, 3
    assert KernelBank.from_median(x).bandwidths == pytest.approx((0.5, 1.0, 2.0, 4.0, 8.0))


def test_mmd2_examples():
    assert mmd2(t([[0.0]]), t([[1.0]]), SINGLE).item() == pytest.approx(2 - 2 * math.exp(-1))
    x, y = torch.randn(6, 4, dtype=D), torch.randn(3, 4, dtype=D)
    bank = KernelBank.from_median(torch.cat([x, y]))
    assert mmd2(x, x[torch.randperm(6)], bank).item() == pytest.approx(0, abs=1e-9)
    assert mmd2(x, y, bank).item() == pytest.approx(mmd2(y, x, bank).item(), abs=1e-12)
    with pytest.raises(ValueError):
        mmd2(x[:0], y, bank)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_mmd2_nonnegative(m, n, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(m, 3, generator=g, dtype=D), torch.randn(n, 3, generator=g, dtype=D) + 0.5
    assert mmd2(x, y, KernelBank.from_median(torch.cat([x, y]))).item() >= -1e-9


def test_regularizer_two_groups_is_half_mmd():
    x = torch.randn(7, 5, dtype=D)
    groups = torch.tensor([4, 4, 4, 9, 9, 9, 9])
    bank = KernelBank((0.7, 1.4))
    v = mmd2(x[:3], x[3:], bank).item()
    assert mmd_regularizer(x, groups, bank).item() == pytest.approx(v / 2, abs=1e-12)


def test_regularizer_matches_pairwise_definition_and_relabeling():
    x = torch.randn(12, 4, dtype=D)
    groups = torch.tensor([0, 0, 1, 1, 1, 2, 2, 2, 2, 5, 5, 5])
    bank = KernelBank.from_median(x)
    ids = groups.unique()
    expected = sum(mmd2(x[groups == i], x[groups == j], bank) for i in ids for j in ids) / len(ids) ** 2
    assert mmd_regularizer(x, groups).item() == pytest.approx(expected.item(), abs=1e-12)
    relabeled = torch.tensor([7, 3, 1, 9])[torch.searchsorted(ids, groups)]
    assert mmd_regularizer(x, relabeled).item() == pytest.approx(expected.item(), abs=1e-12)


def test_regularizer_identical_groups_and_single_group():
    x = torch.randn(4, 3, dtype=D)
    assert mmd_regularizer(torch.cat([x, x]), torch.tensor([0] * 4 + [1] * 4)).item() == pytest.approx(0, abs=1e-12)
    with pytest.warns(RuntimeWarning, match="fewer than two"):
        assert mmd_regularizer(x, torch.zeros(4, dtype=torch.long)).item() == 0


def test_objective_examples():
    hyper = LossHyper()
    e, c, d = objective(t(1.0), t(0.2), t(0.5), hyper)
    assert (e.item(), c.item(), d.item()) == pytest.approx((10.5, 1.0, 0.5))
    e, _, d2 = objective(t(1.0), t(0.2), t(0.5), LossHyper(lambda_mmd=0, lambda_d=0, lambda_cls=3))
    assert e.item() == pytest.approx(3.0) and d2.item() == d.item()


@pytest.mark.parametrize("kw", [dict(alpha=1.5), dict(tau=0), dict(lambda_d=-1), dict(eps=0)])
def test_hyper_validation(kw):
    with pytest.raises(ValueError):
        LossHyper(**kw)


def test_warning_free_default_path():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mmd_regularizer(torch.randn(4, 3), torch.tensor([0, 0, 1, 1]))
