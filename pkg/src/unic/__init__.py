"""Desk-scale multi-teacher feature distillation.

A small numpy autodiff core, a tiny ViT encoder, projector heads, online
feature standardization, the balanced distillation objective, a training
loop, evaluation tools and a synthetic data generator.
"""

__version__ = "0.1.0"
