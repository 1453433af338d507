"""Backend interfaces, toy implementations and the name-based registry."""

from __future__ import annotations

from .interfaces import (
    Backend,
    CaptionerBackend,
    ClassifierBackend,
    GeneratorBackend,
    JointEncoderBackend,
    PerturberBackend,
    SentenceEmbedderBackend,
)
from .synthetic import SyntheticWorld, generate_dataset, load_world
from .toy import (
    ToyAffineGenerator,
    ToyCaptioner,
    ToyJointEncoder,
    ToyLinearClassifier,
    ToyPerturber,
    ToySentenceEmbedder,
)

__all__ = [
    "Backend",
    "CaptionerBackend",
    "PerturberBackend",
    "SentenceEmbedderBackend",
    "JointEncoderBackend",
    "GeneratorBackend",
    "ClassifierBackend",
    "SyntheticWorld",
    "generate_dataset",
    "load_world",
    "ToyCaptioner",
    "ToyPerturber",
    "ToySentenceEmbedder",
    "ToyJointEncoder",
    "ToyAffineGenerator",
    "ToyLinearClassifier",
    "build_backend",
]


def build_backend(kind: str, entry: dict, world: SyntheticWorld):
    """Construct one backend from a config entry like {"name": "toy", "seed": 0}.

    Toy backends need the synthetic world; subprocess adapters need a
    "command" list. Unknown names raise ValueError.
    """
    from .subprocess_adapter import (
        SubprocessCaptioner,
        SubprocessClassifier,
        SubprocessSentenceEmbedder,
    )

    name = entry.get("name", "toy")
    seed = int(entry.get("seed", 0))
    if name == "toy":
        if kind == "captioner":
            return ToyCaptioner(world, seed=seed)
        if kind == "perturber":
            return ToyPerturber(world, seed=seed)
        if kind == "sentence_embedder":
            return ToySentenceEmbedder(seed=seed)
        if kind == "joint_encoder":
            return ToyJointEncoder(world, seed=seed)
        if kind == "generator":
            return ToyAffineGenerator(world, seed=seed, num_steps=int(entry.get("num_steps", 50)))
        if kind == "classifier":
            return ToyLinearClassifier(
                world.image_size, tuple(world.classes), seed=seed,
                feature_dim=int(entry.get("feature_dim", 64)),
                feature_scale=float(entry.get("feature_scale", 40.0)),
            )
        raise ValueError(f"unknown backend kind {kind!r}")
    if name == "subprocess":
        command = entry.get("command")
        if not command:
            raise ValueError("subprocess backend needs a 'command' list")
        if kind == "captioner":
            return SubprocessCaptioner(command, seed=seed)
        if kind == "sentence_embedder":
            return SubprocessSentenceEmbedder(command, seed=seed)
        if kind == "classifier":
            return SubprocessClassifier(command, seed=seed)
        raise ValueError(f"no subprocess adapter for backend kind {kind!r}")
    raise ValueError(f"unknown backend name {name!r} for kind {kind!r}")
