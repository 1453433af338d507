"""Counterfactual stress-testing and reinforcement for image classifiers.

Two-stage workflow: generate caption-guided counterfactual images to expose
a classifier's reliance on spurious features, then fine-tune only its head on
those counterfactuals and blend the result back toward the original weights.
"""

__version__ = "0.1.0"

from .types import (
    BackendDescriptor,
    BackendKind,
    EmbeddingVector,
    ImageTensor,
    LatentVector,
    ScoreVector,
)

__all__ = [
    "BackendDescriptor",
    "BackendKind",
    "EmbeddingVector",
    "ImageTensor",
    "LatentVector",
    "ScoreVector",
    "__version__",
]
