"""Span-based nested named entity recognition with triaffine attention and scoring."""

__version__ = "0.1.0"

from .data_eval import Entity, Example, EvalReport, Prediction, evaluate, generate_synthetic
from .pipeline import Model, ModelConfig, train
from .tensor import Tape, Tensor, grad_check

__all__ = [
    "Entity",
    "EvalReport",
    "Example",
    "Model",
    "ModelConfig",
    "Prediction",
    "Tape",
    "Tensor",
    "evaluate",
    "generate_synthetic",
    "grad_check",
    "train",
    "__version__",
]
