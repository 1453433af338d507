"""Deterministic toy backends over the synthetic world.

Every backend here is a pure function of its constructor arguments and call
inputs; repeated calls return bit-identical results. The affine generator is
deliberately simple enough that null-text optimization and inversion have
closed-form answers, which the test-suite uses as oracles.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..params import ParameterSet
from ..types import (
    BackendDescriptor,
    BackendKind,
    ClassSetUndefinedError,
    DimensionMismatchError,
    EmbeddingVector,
    ImageTensor,
    LatentVector,
    ScoreVector,
    TimestepExhaustedError,
    UnknownClassError,
)
from .interfaces import (
    CaptionerBackend,
    ClassifierBackend,
    GeneratorBackend,
    JointEncoderBackend,
    PerturberBackend,
    SentenceEmbedderBackend,
)
from .synthetic import COLOR_NAMES, FILLER_PHRASES, SyntheticWorld


def _stable_hash(*parts: str) -> int:
    h = hashlib.blake2b("|".join(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


class ToyCaptioner(CaptionerBackend):
    """Reads the class pattern and background color straight off the pixels."""

    def __init__(self, world: SyntheticWorld, seed: int = 0):
        self.world = world
        self.seed = seed

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(BackendKind.CAPTIONER, "toy-captioner", True, self.seed)

    def caption(self, image: ImageTensor, min_words: int = 20, repetition_penalty: float = 1.5) -> str:
        if min_words < 1:
            raise ValueError("min_words must be >= 1")
        if repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")
        cls = self.world.nearest_class(image.data)
        color = self.world.nearest_color(image.data)
        tokens = f"a photo of a {cls} in front of a {color} background".split()
        rng = np.random.default_rng(_stable_hash("caption", str(self.seed), image.id))
        order = list(rng.permutation(len(FILLER_PHRASES)))
        i = 0
        while len(tokens) < min_words:
            if repetition_penalty > 1:
                phrase = FILLER_PHRASES[order[i % len(order)]]
            else:
                phrase = FILLER_PHRASES[int(rng.integers(len(FILLER_PHRASES)))]
            tokens.extend(phrase.split())
            i += 1
        return " ".join(tokens)


# Static substitution tables, one per variation factor. Replacement tuples
# keep a deterministic preference order.
ADJECTIVE_TABLE = {
    "old": ("new", "young"), "new": ("old",), "young": ("old",),
    "big": ("small", "tiny"), "small": ("big", "large"),
    "bright": ("dark", "dim"), "dark": ("bright",),
    "tall": ("short",), "short": ("tall",),
    "soft": ("harsh",), "sharp": ("blurry",), "fine": ("coarse",),
    "quiet": ("noisy",), "calm": ("stormy",), "clear": ("cloudy",),
    "ordinary": ("unusual", "strange"), "visible": ("faint",),
    "natural": ("artificial",), "open": ("covered",),
}

BACKGROUND_TABLE = {
    "mountain": ("beach", "ice sheet"), "beach": ("mountain",),
    "road": ("trail", "highway"), "street": ("snowy street",),
    "forest": ("desert",), "desert": ("forest",),
    "snow": ("grass", "sand"), "grass": ("snow",),
    "field": ("parking lot",), "river": ("canyon",),
}

SUBJECT_TABLE = {
    "man": ("woman",), "woman": ("man",), "boy": ("girl",), "girl": ("boy",),
    "player": ("dancer",), "dog": ("cat",), "cat": ("dog",),
}

OBJECT_TABLE = {
    "apple": ("orange", "pear"), "carrot": ("turnip",),
    "truck": ("car", "bus"), "car": ("truck",),
    "ball": ("cube",), "cup": ("bowl",), "sled": ("cart",),
}

DOMAIN_TABLE = {
    "photo": ("sketch", "paint"), "photograph": ("sketch", "painting"),
    "picture": ("sketch",),
}


class ToyPerturber(PerturberBackend):
    """Rule-based caption perturber over fixed substitution tables.

    When built with a world, the background factor also swaps palette color
    words and the subject factor swaps class nouns, so synthetic-world
    captions always have at least one candidate edit.
    """

    def __init__(self, world: SyntheticWorld | None = None, seed: int = 0):
        self.world = world
        self.seed = seed
        self.tables: dict[str, dict[str, tuple[str, ...]]] = {
            "subject": dict(SUBJECT_TABLE),
            "object": dict(OBJECT_TABLE),
            "background": dict(BACKGROUND_TABLE),
            "adjective": dict(ADJECTIVE_TABLE),
            "data_domain": dict(DOMAIN_TABLE),
        }
        if world is not None:
            n = len(world.colors)
            for i, color in enumerate(world.colors):
                # Distant hues make for visually heavy background edits.
                alts = tuple(world.colors[(i + off) % n] for off in (n // 2, n // 3, 2 * n // 3) if off)
                self.tables["background"][color] = tuple(dict.fromkeys(alts))
            for i, cls in enumerate(world.classes):
                alts = (world.classes[(i + 1) % len(world.classes)],
                        world.classes[(i + 2) % len(world.classes)])
                self.tables["subject"][cls] = alts

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(BackendKind.PERTURBER, "toy-perturber", True, self.seed)

    def perturb(self, caption: str, factor: str, n: int):
        if factor not in self.tables:
            raise ValueError(f"unknown variation factor {factor!r}")
        table = self.tables[factor]
        tokens = caption.split()
        out = []
        for i, tok in enumerate(tokens):
            for repl in table.get(tok.lower(), ()):
                repl_tokens = tuple(repl.split())
                perturbed = " ".join(tokens[:i] + list(repl_tokens) + tokens[i + 1:])
                out.append((perturbed, ((i, i + 1), repl_tokens)))
                if len(out) >= n:
                    return out
        return out


STOPWORDS = frozenset(
    "a an the of in on at with and or to from is are was were for by near under during".split()
)


class ToySentenceEmbedder(SentenceEmbedderBackend):
    """Hashed bag-of-words embedding, stopwords dropped, L2-normalized."""

    def __init__(self, seed: int = 0, dim: int = 256):
        self.seed = seed
        self.dim = dim

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(BackendKind.SENTENCE_EMBEDDER, "toy-sbert", True, self.seed)

    def _bag(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in text.lower().split():
            if tok in STOPWORDS:
                continue
            vec[_stable_hash("tok", str(self.seed), tok) % self.dim] += 1.0
        return vec

    def embed(self, text: str) -> EmbeddingVector:
        vec = self._bag(text)
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
        return EmbeddingVector(vec)


class ToyJointEncoder(JointEncoderBackend):
    """Shared-space image/text encoder.

    Both branches project through one fixed random matrix; the text branch
    renders the caption to pixels first and adds a tiny hashed-token term so
    distinct texts never collide exactly.
    """

    def __init__(self, world: SyntheticWorld, seed: int = 0, dim: int = 32, text_hash_weight: float = 1e-3):
        self.world = world
        self.seed = seed
        self.dim = dim
        self.text_hash_weight = text_hash_weight
        d_pix = 3 * world.image_size * world.image_size
        rng = np.random.default_rng(_stable_hash("joint", str(seed)) % (2**32))
        self.proj = rng.normal(0.0, 1.0, (dim, d_pix)) / np.sqrt(d_pix)

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(BackendKind.JOINT_ENCODER, "toy-clip", True, self.seed)

    @property
    def embed_dim(self) -> int:
        return self.dim

    def encode_image(self, image: ImageTensor) -> EmbeddingVector:
        return EmbeddingVector(self.proj @ image.data.reshape(-1))

    def encode_text(self, text: str) -> EmbeddingVector:
        base = self.proj @ self.world.render_from_caption(text).reshape(-1)
        bag = np.zeros(self.dim)
        for tok in text.lower().split():
            bag[_stable_hash("jtok", str(self.seed), tok) % self.dim] += 1.0
        n = np.linalg.norm(bag)
        if n > 0:
            bag /= n
        return EmbeddingVector(base + self.text_hash_weight * bag)


class ToyAffineGenerator(GeneratorBackend):
    """Diffusion stand-in whose step is affine: S(z, null, c) = a*z + b*null + d_k*c.

    Per-step conditioning weights d_k decay geometrically toward late
    denoising steps (small k) and sum, after accumulation through the a
    factors, to exactly 1 over a full pass, so a full denoise from an
    inverted trajectory with swapped conditioning shifts the output by the
    conditioning delta.
    """

    def __init__(self, world: SyntheticWorld, seed: int = 0, num_steps: int = 50,
                 a: float = 0.97, b: float = 0.4, decay: float = 0.55):
        if a == 0.0 or b == 0.0:
            raise ValueError("step coefficients a and b must be nonzero")
        self.world = world
        self.seed = seed
        self._num_steps = num_steps
        self.a = a
        self.b = b
        self.decay = decay
        k = np.arange(1, num_steps + 1)
        weights = decay ** (k - 1)
        weights = weights / weights.sum()
        # d_k such that d_k * a^(k-1) == weights[k-1].
        self.d = weights / (a ** (k - 1))
        self._d_latent = 3 * world.image_size * world.image_size

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(BackendKind.GENERATOR, "toy-affine-diffusion", True, self.seed)

    @property
    def latent_dim(self) -> int:
        return self._d_latent

    @property
    def num_steps(self) -> int:
        return self._num_steps

    def encode_image(self, image: ImageTensor) -> LatentVector:
        return LatentVector(image.data.reshape(-1), 0)

    def decode_latent(self, z: LatentVector, image_id: str) -> ImageTensor:
        s = self.world.image_size
        arr = np.clip(z.data.reshape(3, s, s), 0.0, 1.0)
        return ImageTensor(arr, image_id)

    def embed_caption(self, caption: str) -> EmbeddingVector:
        return EmbeddingVector(self.world.render_from_caption(caption).reshape(-1))

    def null_embedding(self) -> EmbeddingVector:
        return EmbeddingVector(np.zeros(self._d_latent))

    def _check_embeddings(self, text_embedding: EmbeddingVector, null_embedding: EmbeddingVector) -> None:
        if text_embedding.dim != self._d_latent or null_embedding.dim != self._d_latent:
            raise DimensionMismatchError(
                f"conditioning dims ({text_embedding.dim}, {null_embedding.dim}) "
                f"!= latent dim {self._d_latent}"
            )

    def denoise_step(self, z: LatentVector, k: int, text_embedding: EmbeddingVector,
                     null_embedding: EmbeddingVector, guidance_scale: float = 7.5) -> LatentVector:
        if k == 0:
            raise TimestepExhaustedError("cannot denoise below timestep 0")
        if not 1 <= k <= self._num_steps:
            raise ValueError(f"timestep k={k} outside [1, {self._num_steps}]")
        if z.timestep != k:
            raise ValueError(f"latent timestep {z.timestep} != step k={k}")
        self._check_embeddings(text_embedding, null_embedding)
        out = self.a * z.data + self.b * null_embedding.data + self.d[k - 1] * text_embedding.data
        return LatentVector(out, k - 1)

    def invert_step(self, z: LatentVector, text_embedding: EmbeddingVector,
                    null_embedding: EmbeddingVector, guidance_scale: float = 7.5) -> LatentVector:
        k = z.timestep + 1
        if k > self._num_steps:
            raise ValueError(f"cannot invert beyond timestep {self._num_steps}")
        self._check_embeddings(text_embedding, null_embedding)
        prev = (z.data - self.b * null_embedding.data - self.d[k - 1] * text_embedding.data) / self.a
        return LatentVector(prev, k)

    def grad_null(self, z, k, text_embedding, null_embedding, residual, guidance_scale: float = 7.5):
        # dS/d(null) = b * I, so d||target - S||^2 / d(null) = -2 b residual.
        return -2.0 * self.b * np.asarray(residual, dtype=np.float64)


class ToyLinearClassifier(ClassifierBackend):
    """Linear-softmax classifier over a fixed random pixel projection.

    The projection is the frozen "backbone"; weight and bias of the linear
    head are the only trainable groups.
    """

    HEAD_GROUPS = frozenset({"head.weight", "head.bias"})

    def __init__(self, image_size: int, class_names: tuple[str, ...] | None, seed: int = 0,
                 feature_dim: int = 64, feature_scale: float = 40.0):
        self.image_size = image_size
        self._class_names = tuple(class_names) if class_names else None
        self.seed = seed
        self.feature_dim = feature_dim
        self.feature_scale = feature_scale
        d_pix = 3 * image_size * image_size
        rng = np.random.default_rng(_stable_hash("clf", str(seed)) % (2**32))
        self._proj = rng.normal(0.0, 1.0, (feature_dim, d_pix)) / np.sqrt(d_pix)
        n = len(self._class_names) if self._class_names else 0
        self._w = np.zeros((n, feature_dim))
        self._b = np.zeros(n)

    @property
    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(BackendKind.CLASSIFIER, "toy-linear", True, self.seed)

    @property
    def class_names(self) -> tuple[str, ...]:
        if not self._class_names:
            raise ClassSetUndefinedError("classifier has no class names configured")
        return self._class_names

    def features(self, image: ImageTensor) -> np.ndarray:
        return self.feature_scale * (self._proj @ image.data.reshape(-1))

    def classify(self, image: ImageTensor) -> ScoreVector:
        names = self.class_names
        return ScoreVector(self._w @ self.features(image) + self._b, names)

    def get_parameters(self) -> ParameterSet:
        return ParameterSet(
            {"backbone.proj": self._proj.copy(), "head.weight": self._w.copy(), "head.bias": self._b.copy()},
            self.HEAD_GROUPS,
        )

    def set_parameters(self, params: ParameterSet) -> None:
        from ..types import ShapeMismatchError

        expected = {"backbone.proj": self._proj.shape, "head.weight": self._w.shape, "head.bias": self._b.shape}
        if set(params.groups) != set(expected):
            raise ShapeMismatchError(f"parameter groups {sorted(params.groups)} != {sorted(expected)}")
        for name, shape in expected.items():
            if params.groups[name].shape != shape:
                raise ShapeMismatchError(f"group {name!r}: shape {params.groups[name].shape} != {shape}")
        self._proj = params.groups["backbone.proj"].copy()
        self._w = params.groups["head.weight"].copy()
        self._b = params.groups["head.bias"].copy()

    def _batch_logits(self, images: list[ImageTensor]) -> tuple[np.ndarray, np.ndarray]:
        feats = np.stack([self.features(img) for img in images])
        return feats, feats @ self._w.T + self._b

    def head_gradient(self, images: list[ImageTensor], labels: list[str]):
        names = self.class_names
        idx = []
        for lab in labels:
            if lab not in names:
                raise UnknownClassError(f"label {lab!r} not in classifier class set")
            idx.append(names.index(lab))
        feats, logits = self._batch_logits(images)
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        n = len(images)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), idx] = 1.0
        g = (probs - onehot) / n
        loss = float(-np.mean(np.log(probs[np.arange(n), idx] + 1e-300)))
        return {"head.weight": g.T @ feats, "head.bias": g.sum(axis=0)}, loss

    def fit_head(self, images: list[ImageTensor], labels: list[str],
                 epochs: int = 200, lr: float = 0.02) -> float:
        """Full-batch gradient descent on the head; returns final loss."""
        loss = float("nan")
        for _ in range(epochs):
            grads, loss = self.head_gradient(images, labels)
            self._w -= lr * grads["head.weight"]
            self._b -= lr * grads["head.bias"]
        return loss
