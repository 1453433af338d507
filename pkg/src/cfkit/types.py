"""Core value types shared across the toolkit.

Everything here is a thin, validated wrapper around numpy arrays or plain
strings. Validation happens at construction so downstream code can assume
finite, well-shaped data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class CfkitError(Exception):
    """Base class for all toolkit errors."""


class BackendUnavailableError(CfkitError):
    """A real adapter could not be reached."""


class DimensionMismatchError(CfkitError):
    """An adapter returned arrays with incompatible dimensions."""


class TimestepExhaustedError(CfkitError):
    """A denoising step was requested at timestep 0."""


class ClassSetUndefinedError(CfkitError):
    """Classifier used before its class names were configured."""


class UnknownClassError(CfkitError):
    """A ground-truth class is not in the classifier's class set."""


class ZeroVectorError(CfkitError):
    """A zero vector was supplied where a direction is required."""


class ShapeMismatchError(CfkitError):
    """Incompatible matrix or parameter-group shapes."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ImageTensor:
    """A (channels, height, width) image with values in [0, 1]."""

    data: np.ndarray
    id: str

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"image must be (C,H,W), got shape {arr.shape}")
        c, h, w = arr.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"degenerate image shape {arr.shape}")
        _check_finite(arr, "image")
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", np.clip(arr, 0.0, 1.0))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LatentVector:
    """A flat latent of dimension d_latent tagged with its diffusion timestep."""

    data: np.ndarray
    timestep: int

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64).reshape(-1)
        _check_finite(arr, "latent")
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class EmbeddingVector:
    """A flat embedding of dimension d_embed."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64).reshape(-1)
        _check_finite(arr, "embedding")
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.linalg.norm(self.data) <= tol)


@dataclass(frozen=True)
class ScoreVector:
    """Per-class classifier scores, aligned with class_names."""

    scores: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        names = tuple(self.class_names)
        if len(names) < 1:
            raise ValueError("need at least one class")
        if arr.shape[0] != len(names):
            raise ValueError("scores and class_names length mismatch")
        _check_finite(arr, "scores")
        object.__setattr__(self, "scores", arr)
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


class BackendKind(str, Enum):
    CAPTIONER = "captioner"
    PERTURBER = "perturber"
    SENTENCE_EMBEDDER = "sentence_embedder"
    JOINT_ENCODER = "joint_encoder"
    GENERATOR = "generator"
    CLASSIFIER = "classifier"


@dataclass(frozen=True)
class BackendDescriptor:
    """Identity card every backend instance must expose."""

    kind: BackendKind
    name: str
    deterministic: bool
    seed: int = 0

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "name": self.name,
            "deterministic": self.deterministic,
            "seed": self.seed,
        }
