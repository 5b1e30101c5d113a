# coding: utf-8

# # The objective, one term at a time
#
# Small hand-checkable inputs for every loss the trainer combines.

import math

import torch

from tasked.losses import (KernelBank, LossHyper, activity_loss, domain_loss, kd_loss, mmd2,
                           mmd_regularizer, objective, softened_probs)

# ## Activity loss
#
# Half class-weighted cross-entropy, half a single dice term over the batch.
# A 50/50 guess on a class-0 window costs ln 2 / 2 + 0.5 / 2.

logits = torch.log(torch.tensor([[0.5, 0.5]]))
print("activity loss:", activity_loss(logits, torch.tensor([0])).item())

# ## Temperature and distillation

print("softened [2, 0] at tau=2:", softened_probs(torch.tensor([2.0, 0.0]), 2.0).tolist())
teacher = torch.log(torch.tensor([[0.9, 0.1]]))
student = torch.log(torch.tensor([[0.5, 0.5]]))
print("KL(teacher || student):", kd_loss(student, teacher, tau=1.0).item(),
      "expected", 0.9 * math.log(1.8) + 0.1 * math.log(0.2))

# ## Subject loss
#
# A discriminator with no opinion over 4 subjects pays ln 4.

print("uniform over 4:", domain_loss(torch.zeros(4, 4), torch.arange(4)).item())

# ## MMD between subjects

bank = KernelBank((math.sqrt(0.5),))  # 2 sigma^2 = 1
print("mmd2({0}, {1}):", mmd2(torch.zeros(1, 1), torch.ones(1, 1), bank).item())

torch.manual_seed(0)
near = torch.randn(40, 8)
far = torch.randn(40, 8) + 2
groups = torch.repeat_interleave(torch.arange(2), 40)
print("regularizer, same distribution:", mmd_regularizer(torch.cat([near, torch.randn(40, 8)]), groups).item())
print("regularizer, shifted subject:  ", mmd_regularizer(torch.cat([near, far]), groups).item())

# ## Putting it together
#
# The extractor minimizes lambda_cls * L_cls + lambda_MMD * L_MMD - lambda_D * L_D.

e, c, d = objective(torch.tensor(1.0), torch.tensor(0.2), torch.tensor(0.5), LossHyper())
print("extractor / classifier / discriminator objectives:", e.item(), c.item(), d.item())
