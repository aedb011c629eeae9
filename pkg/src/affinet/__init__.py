"""Trainable CNN engine: multi-scale maxout blocks, ring-variance filter
regularization, affine digit benchmarks, and a training harness."""

from . import data, gradcheck, model, nn, optim, reports, rings, train
from .checkpoint import Checkpoint

__all__ = [
    "Checkpoint",
    "data",
    "gradcheck",
    "model",
    "nn",
    "optim",
    "reports",
    "rings",
    "train",
]
