# coding: utf-8

# # Walking a window through the three networks

import torch

from tasked.model import ModelConfig, TaskedModel

# Three sensors of 3, 6 and 9 channels, 64-sample windows, 5 activities and
# 8 subject classes on the discriminator side.

cfg = ModelConfig(sensor_channels=[3, 6, 9], window_size=64, n_activities=5, n_domains=8)
model = TaskedModel(cfg).eval()
x = torch.randn(2, 18, 64)

t = model.extractor.positional(model.extractor.stems(x))
print("after stems:", tuple(t.shape))  # (batch, 32, W, S)
for i, block in enumerate(model.extractor.blocks):
    t = block(t)
    print(f"after block {i + 1}:", tuple(t.shape))

e, activity_logits, subject_logits = model(x)
print("embedding:", tuple(e.shape), "activity logits:", tuple(activity_logits.shape),
      "subject logits:", tuple(subject_logits.shape))

# Attention mixes sensors at every time step; rows are distributions.

a = model.extractor.blocks[0].attention_weights(model.extractor.positional(model.extractor.stems(x)))
print("attention:", tuple(a.shape), "row sums:", a.sum(-1).min().item(), a.sum(-1).max().item())

for name in ("extractor", "classifier", "discriminator"):
    print(f"{name:>13}: {sum(p.numel() for p in model.params(name)):,} parameters")
