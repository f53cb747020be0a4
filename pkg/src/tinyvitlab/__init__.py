"""Tiny Vision Transformer laboratory.

A self-contained CPU lab for training tiny ViTs on CIFAR-10: a deterministic
tape-based autodiff core, multi-head attention with optional low-rank (latent)
projection compression, a multi-CLS-token head, the full augmentation /
regularization stack, AdamW and Lion optimizers, deterministic in-process
data parallelism, and profiling / throughput benchmarking.
"""

from tinyvitlab.tensor import Tensor, Tape, backward, grad_check
from tinyvitlab.model import ModelConfig, MlaConfig

__all__ = ["Tensor", "Tape", "backward", "grad_check", "ModelConfig", "MlaConfig"]

__version__ = "0.1.0"
