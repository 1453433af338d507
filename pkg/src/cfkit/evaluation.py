"""Top-5 accuracy evaluation and weakness reporting.

Score ties in the top-k ranking break by ascending class index, which keeps
every accuracy deterministic; percentages are reported to two decimals.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .types import ImageTensor, ScoreVector, UnknownClassError

REPORT_SCHEMA_VERSION = 1


@dataclass
class LabeledSet:
    """A named list of (image, ground-truth class) pairs."""

    items: list[tuple[ImageTensor, str]]
    name: str
    class_universe: list[str]

    def __post_init__(self):
        if not self.items:
            raise ValueError(f"labeled set {self.name!r} is empty")
        universe = set(self.class_universe)
        for _, gt in self.items:
            if gt not in universe:
                raise UnknownClassError(f"label {gt!r} not in class universe of {self.name!r}")

    def __len__(self) -> int:
        return len(self.items)


def load_labeled_set(manifest_path: str | Path, name: str,
                     class_universe: list[str]) -> LabeledSet:
    """Read a JSON-lines manifest of {"image": path, "label": class}.

    Image paths are resolved relative to the manifest's directory.
    """
    from PIL import Image

    base = Path(manifest_path).parent
    items = []
    with Path(manifest_path).open() as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            path = base / row["image"]
            arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
            items.append((ImageTensor(np.moveaxis(arr, -1, 0), path.stem), row["label"]))
    return LabeledSet(items, name, class_universe)


def acc_at_k(scores: ScoreVector, gt_class: str, k: int) -> int:
    """1 iff gt_class ranks among the k best scores (ties break by class index)."""
    if not 1 <= k <= scores.n_classes:
        raise ValueError(f"k={k} outside [1, {scores.n_classes}]")
    if gt_class not in scores.class_names:
        raise UnknownClassError(f"class {gt_class!r} not in score vector")
    order = np.argsort(-scores.scores, kind="stable")
    gt_index = scores.class_names.index(gt_class)
    return int(gt_index in order[:k])


def mean_acc5(labeled_set: LabeledSet, classifier_backend) -> float:
    """Percentage of items whose ground truth lands in the classifier's top 5."""
    hits = 0
    for image, gt in labeled_set.items:
        try:
            scores = classifier_backend.classify(image)
        except Exception as exc:
            raise RuntimeError(f"classification failed on item {image.id!r} of {labeled_set.name!r}") from exc
        hits += acc_at_k(scores, gt, min(5, scores.n_classes))
    return round(100.0 * hits / len(labeled_set), 2)


def delta_acc5(T: LabeledSet, T_prime: LabeledSet, classifier_backend) -> float:
    """mean_acc5(T') - mean_acc5(T); negative values expose weakness."""
    return delta_percent(mean_acc5(T, classifier_backend), mean_acc5(T_prime, classifier_backend))


def delta_percent(acc5_T: float, acc5_Tprime: float) -> float:
    """Pure arithmetic form of the accuracy reduction, rounded to 2 decimals."""
    return round(acc5_Tprime - acc5_T, 2)


@dataclass
class EvalReport:
    """Per-class and per-factor top-5 accuracy deltas between T and T'."""

    per_class: dict[str, dict[str, float]]
    per_factor: dict[str, float]
    model_name: str
    set_sizes: dict[str, int]
    class_order: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_order:
            self.class_order = sorted(self.per_class, key=lambda c: self.per_class[c]["delta"])
        for cls, row in self.per_class.items():
            for key in ("acc5_T", "acc5_Tprime", "delta"):
                if not 0.0 <= row[key] <= 100.0 and key != "delta":
                    raise ValueError(f"{key} for {cls!r} outside [0, 100]")
            if abs(row["delta"] - (row["acc5_Tprime"] - row["acc5_T"])) > 0.005 + 1e-9:
                raise ValueError(f"delta for {cls!r} inconsistent with its accuracies")

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "model_name": self.model_name,
            "set_sizes": self.set_sizes,
            "per_class": self.per_class,
            "per_factor": self.per_factor,
            "class_order": self.class_order,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        version = d.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version!r}")
        return cls(
            per_class=d["per_class"],
            per_factor=d["per_factor"],
            model_name=d["model_name"],
            set_sizes=d["set_sizes"],
            class_order=d["class_order"],
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["class", "acc5_T", "acc5_Tprime", "delta"])
        for cls_name in self.class_order:
            row = self.per_class[cls_name]
            writer.writerow([cls_name, f"{row['acc5_T']:.2f}", f"{row['acc5_Tprime']:.2f}",
                             f"{row['delta']:.2f}"])
        return buf.getvalue()


def build_weakness_report(T: LabeledSet, T_prime: LabeledSet, cf_metadata: dict[str, str],
                          classifier_backend) -> EvalReport:
    """Per-class accuracy drop plus a per-factor breakdown of the counterfactual set.

    ``cf_metadata`` maps a T' image id to the variation factor of its edit;
    items without metadata are counted and excluded from the factor breakdown.
    The per-factor section is an extension beyond the per-class layout.
    """

    def per_class_hits(labeled_set: LabeledSet) -> tuple[dict[str, int], dict[str, int]]:
        hits: dict[str, int] = {}
        counts: dict[str, int] = {}
        for image, gt in labeled_set.items:
            scores = classifier_backend.classify(image)
            counts[gt] = counts.get(gt, 0) + 1
            hits[gt] = hits.get(gt, 0) + acc_at_k(scores, gt, min(5, scores.n_classes))
        return hits, counts

    hits_T, counts_T = per_class_hits(T)
    hits_Tp, counts_Tp = per_class_hits(T_prime)

    per_class = {}
    for cls_name in sorted(set(counts_T) | set(counts_Tp)):
        acc_T = round(100.0 * hits_T.get(cls_name, 0) / counts_T[cls_name], 2) if cls_name in counts_T else 0.0
        acc_Tp = round(100.0 * hits_Tp.get(cls_name, 0) / counts_Tp[cls_name], 2) if cls_name in counts_Tp else 0.0
        per_class[cls_name] = {
            "acc5_T": acc_T,
            "acc5_Tprime": acc_Tp,
            "delta": delta_percent(acc_T, acc_Tp),
        }

    factor_hits: dict[str, int] = {}
    factor_counts: dict[str, int] = {}
    missing = 0
    base_acc: dict[str, float] = {c: per_class[c]["acc5_T"] for c in per_class}
    factor_base: dict[str, float] = {}
    for image, gt in T_prime.items:
        factor = cf_metadata.get(image.id)
        if factor is None:
            missing += 1
            continue
        scores = classifier_backend.classify(image)
        factor_hits[factor] = factor_hits.get(factor, 0) + acc_at_k(scores, gt, min(5, scores.n_classes))
        factor_counts[factor] = factor_counts.get(factor, 0) + 1
        factor_base[factor] = factor_base.get(factor, 0.0) + base_acc.get(gt, 0.0)

    per_factor = {}
    for factor in sorted(factor_counts):
        acc = 100.0 * factor_hits[factor] / factor_counts[factor]
        baseline = factor_base[factor] / factor_counts[factor]
        per_factor[factor] = round(acc - baseline, 2)

    return EvalReport(
        per_class=per_class,
        per_factor=per_factor,
        model_name=classifier_backend.descriptor.name,
        set_sizes={"T": len(T), "T_prime": len(T_prime)},
        metadata={
            "tie_break": "ascending class index",
            "per_factor_note": "extension: delta vs per-class baseline accuracy",
            "missing_factor_metadata": missing,
        },
    )
