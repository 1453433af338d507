"""Narrow contracts for the six external-model roles.

Real model adapters (captioning models, LLM perturbers, diffusion generators,
CLIP-style encoders, classifiers) plug in behind these interfaces; the toy
implementations in :mod:`cfkit.backends.toy` satisfy the same contracts
deterministically at desk scale.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from ..params import ParameterSet
from ..types import BackendDescriptor, EmbeddingVector, ImageTensor, LatentVector, ScoreVector


class Backend(ABC):
    """Common surface: every backend identifies itself via a descriptor."""

    @property
    @abstractmethod
    def descriptor(self) -> BackendDescriptor: ...


class CaptionerBackend(Backend):
    """Produces a descriptive caption for an image."""

    @abstractmethod
    def caption(self, image: ImageTensor, min_words: int = 20, repetition_penalty: float = 1.5) -> str:
        """Return a caption with at least ``min_words`` whitespace tokens."""


class PerturberBackend(Backend):
    """Proposes single-factor caption alterations.

    Returns a list of (perturbed_caption, changed_span) pairs where
    changed_span is ((start, end) token indices in the original, replacement tokens).
    """

    @abstractmethod
    def perturb(self, caption: str, factor: str, n: int) -> list[tuple[str, tuple[tuple[int, int], tuple[str, ...]]]]: ...


class SentenceEmbedderBackend(Backend):
    """Maps a sentence to a fixed-dimension embedding for similarity filtering."""

    @abstractmethod
    def embed(self, text: str) -> EmbeddingVector: ...


class JointEncoderBackend(Backend):
    """CLIP-style paired image/text encoder; both branches share one embedding space."""

    @property
    @abstractmethod
    def embed_dim(self) -> int: ...

    @abstractmethod
    def encode_image(self, image: ImageTensor) -> EmbeddingVector: ...

    @abstractmethod
    def encode_text(self, text: str) -> EmbeddingVector: ...

    def encode_pair(self, image: ImageTensor, text: str) -> tuple[EmbeddingVector, EmbeddingVector]:
        from ..types import DimensionMismatchError

        if not text:
            raise ValueError("text must be nonempty")
        img_emb = self.encode_image(image)
        txt_emb = self.encode_text(text)
        if img_emb.dim != txt_emb.dim:
            raise DimensionMismatchError(
                f"image branch dim {img_emb.dim} != text branch dim {txt_emb.dim}"
            )
        return img_emb, txt_emb


class GeneratorBackend(Backend):
    """Latent diffusion generator exposing single deterministic sampling steps.

    The pipeline drives it through: image <-> latent codecs, a caption
    conditioning embedding, a default null embedding, one forward denoising
    step and its inverse.
    """

    @property
    @abstractmethod
    def latent_dim(self) -> int: ...

    @property
    @abstractmethod
    def num_steps(self) -> int: ...

    @abstractmethod
    def encode_image(self, image: ImageTensor) -> LatentVector:
        """Image -> z_0 (timestep 0)."""

    @abstractmethod
    def decode_latent(self, z: LatentVector, image_id: str) -> ImageTensor:
        """z_0 -> image (values clipped to [0, 1])."""

    @abstractmethod
    def embed_caption(self, caption: str) -> EmbeddingVector:
        """Caption -> conditioning embedding used by the sampling steps."""

    @abstractmethod
    def null_embedding(self) -> EmbeddingVector:
        """Default unconditional embedding (the starting point for null-text tuning)."""

    @abstractmethod
    def denoise_step(
        self,
        z: LatentVector,
        k: int,
        text_embedding: EmbeddingVector,
        null_embedding: EmbeddingVector,
        guidance_scale: float = 7.5,
    ) -> LatentVector:
        """One deterministic sampling step: latent at timestep k -> timestep k-1."""

    @abstractmethod
    def invert_step(
        self,
        z: LatentVector,
        text_embedding: EmbeddingVector,
        null_embedding: EmbeddingVector,
        guidance_scale: float = 7.5,
    ) -> LatentVector:
        """Inverse of denoise_step: latent at timestep k-1 -> timestep k."""

    def grad_null(
        self,
        z: LatentVector,
        k: int,
        text_embedding: EmbeddingVector,
        null_embedding: EmbeddingVector,
        residual: np.ndarray,
        guidance_scale: float = 7.5,
    ) -> np.ndarray:
        """Gradient of ||target - denoise_step(...)||^2 w.r.t. the null embedding.

        ``residual`` is target - denoise_step(z, k, text, null). Default
        implementation uses central finite differences; backends with analytic
        derivatives should override.
        """
        eps = 1e-6
        d = null_embedding.dim
        grad = np.empty(d)
        base = null_embedding.data
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps
            hi = self.denoise_step(z, k, text_embedding, EmbeddingVector(base + e), guidance_scale)
            lo = self.denoise_step(z, k, text_embedding, EmbeddingVector(base - e), guidance_scale)
            grad[i] = -np.dot(residual, (hi.data - lo.data) / (2 * eps))
        return 2.0 * grad


class ClassifierBackend(Backend):
    """Classifier under test; also the fine-tuning target for reinforcement."""

    @property
    @abstractmethod
    def class_names(self) -> tuple[str, ...]: ...

    @abstractmethod
    def classify(self, image: ImageTensor) -> ScoreVector: ...

    @abstractmethod
    def get_parameters(self) -> ParameterSet:
        """Deep copy of current parameters."""

    @abstractmethod
    def set_parameters(self, params: ParameterSet) -> None: ...

    @abstractmethod
    def head_gradient(
        self, images: list[ImageTensor], labels: list[str]
    ) -> tuple[dict[str, np.ndarray], float]:
        """Mean cross-entropy gradient over the batch for each head group, plus the loss."""
