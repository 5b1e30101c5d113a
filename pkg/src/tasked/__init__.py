"""Subject-invariant activity recognition from body-worn sensors.

A spatial-attention feature extractor trained in two phases: multi-task
pre-training with a subject discriminator, then adversarial training with
multi-kernel MMD and self-distillation from the pre-trained snapshot.
"""

__version__ = "0.1.0"
