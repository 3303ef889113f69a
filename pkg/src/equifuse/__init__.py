"""Energy-balanced multimodal fusion at desk scale.

A self-contained trainer for multimodal classifiers built on a small
reverse-mode autodiff engine: per-modality shared/specific
disentanglement, cross-modal enhancement of weak modalities,
energy-based modality coordination, and per-sample trust-weighted
distillation, all exercised against a synthetic Gaussian benchmark with
an exact Bayes oracle.
"""

from .autodiff import Tape, Tensor, backward, grad_check, grad_of_scalar_wrt
from .config import ExperimentConfig, default_config
from .synthetic import GeneratorSpec, ModalityConfig, MultimodalBatch, default_spec, generate

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "grad_of_scalar_wrt",
    "ExperimentConfig",
    "default_config",
    "GeneratorSpec",
    "ModalityConfig",
    "MultimodalBatch",
    "default_spec",
    "generate",
    "__version__",
]
