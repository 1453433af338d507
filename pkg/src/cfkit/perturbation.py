"""Caption perturbation: edit generation, low-rank weight merging, filtering.

The low-rank adapter algebra is pure weight math (W_ft = W_pt + A @ B); the
actual perturber model sits behind a backend interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .types import ShapeMismatchError, ZeroVectorError, EmbeddingVector


class VariationFactor(str, Enum):
    SUBJECT = "subject"
    OBJECT = "object"
    BACKGROUND = "background"
    ADJECTIVE = "adjective"
    DATA_DOMAIN = "data_domain"


class Verdict(str, Enum):
    ACCEPTED = "accepted"
    REJECTED_CLASS_CHANGE = "rejected_class_change"
    REJECTED_TOO_SIMILAR = "rejected_too_similar"
    REJECTED_DEGENERATE = "rejected_degenerate"


@dataclass(frozen=True)
class CaptionEdit:
    """One candidate caption alteration plus its filter outcome."""

    original: str
    perturbed: str
    factor: VariationFactor
    changed_span: tuple[tuple[int, int], tuple[str, ...]]
    similarity_to_original: float | None = None
    verdict: Verdict | None = None

    def __post_init__(self):
        (start, end), _repl = self.changed_span
        n = len(self.original.split())
        if not (0 <= start <= end <= n):
            raise ValueError(f"changed_span ({start}, {end}) out of bounds for {n} tokens")
        if self.verdict == Verdict.ACCEPTED and self.perturbed == self.original:
            raise ValueError("an accepted edit must differ from the original")

    def to_json(self) -> str:
        return json.dumps(
            {
                "original": self.original,
                "perturbed": self.perturbed,
                "factor": self.factor.value,
                "changed_span": [list(self.changed_span[0]), list(self.changed_span[1])],
                "similarity_to_original": self.similarity_to_original,
                "verdict": self.verdict.value if self.verdict else None,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "CaptionEdit":
        d = json.loads(line)
        return cls(
            original=d["original"],
            perturbed=d["perturbed"],
            factor=VariationFactor(d["factor"]),
            changed_span=(tuple(d["changed_span"][0]), tuple(d["changed_span"][1])),
            similarity_to_original=d.get("similarity_to_original"),
            verdict=Verdict(d["verdict"]) if d.get("verdict") else None,
        )


def save_edits(edits: list[CaptionEdit], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for e in edits:
            f.write(e.to_json() + "\n")


def load_edits(path: str | Path) -> list[CaptionEdit]:
    with Path(path).open() as f:
        return [CaptionEdit.from_json(line) for line in f if line.strip()]


@dataclass(frozen=True)
class AdapterWeights:
    """Low-rank update A @ B of rank r over a base weight matrix."""

    base: np.ndarray
    A: np.ndarray
    B: np.ndarray
    rank: int

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        if base.ndim != 2 or A.ndim != 2 or B.ndim != 2:
            raise ShapeMismatchError("base, A and B must all be matrices")
        d, k = base.shape
        if A.shape != (d, self.rank) or B.shape != (self.rank, k):
            raise ShapeMismatchError(
                f"expected A ({d}, {self.rank}) and B ({self.rank}, {k}); "
                f"got {A.shape} and {B.shape}"
            )
        if not 1 <= self.rank <= min(d, k):
            raise ValueError(f"rank {self.rank} outside [1, {min(d, k)}]")
        for name, arr in (("base", base), ("A", A), ("B", B)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)


def merge_adapter(adapter: AdapterWeights) -> np.ndarray:
    """Merged weights: base + A @ B. Inputs are left untouched."""
    return adapter.base + adapter.A @ adapter.B


def cosine_similarity(u: EmbeddingVector, v: EmbeddingVector) -> float:
    if u.dim != v.dim:
        raise ShapeMismatchError(f"dimension mismatch: {u.dim} vs {v.dim}")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u.data, v.data) / (nu * nv), -1.0, 1.0))


@dataclass
class FilterPolicy:
    """Acceptance rules for perturbed captions."""

    max_similarity: float = 0.95
    class_synonyms: dict[str, set[str]] = field(default_factory=dict)
    min_caption_tokens: int = 3

    def __post_init__(self):
        if not 0.0 < self.max_similarity <= 1.0:
            raise ValueError("max_similarity must be in (0, 1]")
        self.class_synonyms = {k: set(v) for k, v in self.class_synonyms.items()}

    def protected_tokens(self, gt_class: str) -> set[str]:
        tokens = {t.lower() for t in gt_class.split()}
        tokens |= {s.lower() for s in self.class_synonyms.get(gt_class, set())}
        return tokens

    @classmethod
    def with_synonyms_file(cls, path: str | Path, **kwargs) -> "FilterPolicy":
        synonyms = json.loads(Path(path).read_text())
        return cls(class_synonyms={k: set(v) for k, v in synonyms.items()}, **kwargs)


def generate_edits(caption: str, factors: set[VariationFactor], n_per_factor: int,
                   perturber_backend) -> list[CaptionEdit]:
    """Ask the perturber for up to n_per_factor edits per factor; verdicts unset."""
    if not caption:
        raise ValueError("caption must be nonempty")
    if n_per_factor < 1:
        raise ValueError("n_per_factor must be >= 1")
    edits: list[CaptionEdit] = []
    for factor in sorted(factors, key=lambda f: f.value):
        try:
            proposals = perturber_backend.perturb(caption, factor.value, n_per_factor)
        except Exception as exc:
            raise RuntimeError(f"perturber failed on caption {caption!r} (factor {factor.value})") from exc
        for perturbed, span in proposals:
            edits.append(CaptionEdit(caption, perturbed, factor, span))
    return edits


def filter_edits(edits: list[CaptionEdit], gt_class: str, policy: FilterPolicy,
                 embedder_backend) -> list[CaptionEdit]:
    """Assign a verdict to every edit; order preserved, duplicates rejected.

    Accepted edits must not touch a protected ground-truth token, must not be
    near-identical to the original, and must keep a minimum caption length.
    """
    if not gt_class:
        raise ValueError("gt_class must be nonempty")
    protected = policy.protected_tokens(gt_class)
    out: list[CaptionEdit] = []
    seen_perturbed: set[str] = set()

    for edit in edits:
        verdict = None
        similarity = edit.similarity_to_original

        orig_tokens = edit.original.split()
        pert_tokens = edit.perturbed.split()
        (start, end), repl = edit.changed_span
        removed = {t.lower() for t in orig_tokens[start:end]}
        added = {t.lower() for t in repl}

        if len(pert_tokens) < policy.min_caption_tokens:
            verdict = Verdict.REJECTED_DEGENERATE
        elif edit.perturbed in seen_perturbed:
            verdict = Verdict.REJECTED_DEGENERATE
        elif (removed - added) & protected:
            verdict = Verdict.REJECTED_CLASS_CHANGE
        elif edit.perturbed == edit.original:
            similarity = 1.0
            verdict = Verdict.REJECTED_TOO_SIMILAR
        else:
            if similarity is None:
                u = embedder_backend.embed(edit.original)
                v = embedder_backend.embed(edit.perturbed)
                try:
                    similarity = cosine_similarity(u, v)
                except ZeroVectorError:
                    similarity = 0.0
            verdict = (
                Verdict.REJECTED_TOO_SIMILAR
                if similarity > policy.max_similarity
                else Verdict.ACCEPTED
            )

        if verdict == Verdict.ACCEPTED:
            seen_perturbed.add(edit.perturbed)
        out.append(replace(edit, similarity_to_original=similarity, verdict=verdict))
    return out
