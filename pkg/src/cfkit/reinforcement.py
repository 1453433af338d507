"""Head-only fine-tuning with weight-space interpolation.

Training touches only the classifier head; the final parameters blend the
fine-tuned head back toward the original weights with mixing coefficient
alpha, which keeps pre-existing competence while absorbing the
counterfactual training signal.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .evaluation import LabeledSet, mean_acc5
from .params import ParameterSet
from .types import ImageTensor, ShapeMismatchError


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.0001
    max_epochs: int = 50
    min_delta: float = 0.005
    alpha: float = 0.3
    seed: int = 0
    patience: int = 5
    blend_per_epoch: bool = False
    alpha_grid_search: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainingRecord:
    epoch_metrics: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    epochs_run: int = 0


def blend_parameters(theta0: ParameterSet, theta1: ParameterSet, alpha: float,
                     scope: set[str]) -> ParameterSet:
    """(1-alpha)*theta0 + alpha*theta1 on groups in scope; theta0 elsewhere."""
    if not theta0.same_structure(theta1):
        raise ShapeMismatchError("parameter sets differ in group names or shapes")
    unknown = set(scope) - set(theta0.groups)
    if unknown:
        raise ShapeMismatchError(f"scope names {sorted(unknown)} not in parameter groups")
    groups = {}
    for name, arr0 in theta0.groups.items():
        if name in scope:
            groups[name] = (1.0 - alpha) * arr0 + alpha * theta1.groups[name]
        else:
            groups[name] = arr0.copy()
    return ParameterSet(groups, theta0.head_groups)


def fine_tune_head(classifier_backend, train_set: LabeledSet, val_set: LabeledSet,
                   config: TrainConfig) -> tuple[ParameterSet, TrainingRecord]:
    """SGD on the classifier head with early stopping on validation Acc@5.

    Stops once the best validation accuracy has not improved by at least
    min_delta for ``patience`` consecutive epochs. The starting parameters
    are restored on the backend before returning, so the backend is left
    unchanged; the fine-tuned parameters come back as theta1.
    """
    theta0 = classifier_backend.get_parameters()
    if not theta0.head_groups:
        raise ValueError("classifier exposes no head groups to fine-tune")

    rng = np.random.default_rng(config.seed)
    images = [img for img, _ in train_set.items]
    labels = [lab for _, lab in train_set.items]
    n = len(images)

    record = TrainingRecord()
    best_val = -np.inf
    stale = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                batch_images = [images[i] for i in idx]
                batch_labels = [labels[i] for i in idx]
                grads, loss = classifier_backend.head_gradient(batch_images, batch_labels)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
                losses.append(loss)
                params = classifier_backend.get_parameters()
                for name in params.head_groups:
                    params.groups[name] -= config.learning_rate * grads[name]
                classifier_backend.set_parameters(params)
            if config.blend_per_epoch:
                current = classifier_backend.get_parameters()
                classifier_backend.set_parameters(
                    blend_parameters(theta0, current, config.alpha, set(theta0.head_groups))
                )
            val_acc = mean_acc5(val_set, classifier_backend)
            record.epoch_metrics.append({
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_acc5": val_acc,
            })
            record.epochs_run = epoch
            # min_delta is on the [0, 1] accuracy scale; val_acc is a percentage.
            if val_acc >= best_val + 100.0 * config.min_delta:
                best_val = val_acc
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    record.stopped_early = True
                    break
        theta1 = classifier_backend.get_parameters()
    finally:
        classifier_backend.set_parameters(theta0)

    # Freezing contract: body groups never move during head training.
    for name in theta0.body_group_names():
        theta1.groups[name] = theta0.groups[name].copy()
    return theta1, record


@dataclass
class ComparisonReport:
    """Side-by-side Acc@5 per class and arm on one evaluation set."""

    set_name: str
    per_class: dict[str, dict[str, float]]
    overall: dict[str, float]
    model_name: str
    arms: list[str]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "set": self.set_name,
            "model_name": self.model_name,
            "arms": self.arms,
            "per_class": self.per_class,
            "overall": self.overall,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonReport":
        return cls(d["set"], d["per_class"], d["overall"], d["model_name"],
                   d["arms"], d.get("metadata", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["set", "class"] + self.arms)
        for cls_name in sorted(self.per_class):
            row = self.per_class[cls_name]
            writer.writerow([self.set_name, cls_name] + [f"{row[a]:.2f}" for a in self.arms])
        writer.writerow([self.set_name, "__overall__"] + [f"{self.overall[a]:.2f}" for a in self.arms])
        return buf.getvalue()


def _per_class_acc5(labeled_set: LabeledSet, classifier_backend) -> dict[str, float]:
    from .evaluation import acc_at_k

    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for image, gt in labeled_set.items:
        scores = classifier_backend.classify(image)
        counts[gt] = counts.get(gt, 0) + 1
        hits[gt] = hits.get(gt, 0) + acc_at_k(scores, gt, min(5, scores.n_classes))
    return {c: round(100.0 * hits.get(c, 0) / counts[c], 2) for c in counts}


def reinforce(classifier_backend, cf_train: LabeledSet, val_set: LabeledSet,
              eval_sets: list[LabeledSet], config: TrainConfig,
              std_train: LabeledSet | None = None,
              ) -> tuple[ParameterSet, dict[str, ComparisonReport], TrainingRecord]:
    """Fine-tune on counterfactuals, blend with alpha, compare on every eval set.

    Returns the blended parameters, one comparison report per eval set
    (columns baseline / standard [if std_train given] / counterfactual), and
    the training record. The backend is left holding the blended parameters.
    """
    theta0 = classifier_backend.get_parameters()
    scope = set(theta0.head_groups)

    theta1, record = fine_tune_head(classifier_backend, cf_train, val_set, config)

    if config.alpha_grid_search:
        best_alpha, best_acc = config.alpha, -np.inf
        for alpha in [round(0.1 * i, 1) for i in range(11)]:
            classifier_backend.set_parameters(blend_parameters(theta0, theta1, alpha, scope))
            acc = mean_acc5(val_set, classifier_backend)
            if acc > best_acc:
                best_alpha, best_acc = alpha, acc
        alpha = best_alpha
        classifier_backend.set_parameters(theta0)
    else:
        alpha = config.alpha

    theta_std = None
    if std_train is not None:
        theta_std_ft, _ = fine_tune_head(classifier_backend, std_train, val_set, config)
        theta_std = blend_parameters(theta0, theta_std_ft, alpha, scope)

    blended = blend_parameters(theta0, theta1, alpha, scope)

    arms = ["baseline"] + (["standard"] if theta_std is not None else []) + ["counterfactual"]
    comparisons: dict[str, ComparisonReport] = {}
    for eval_set in eval_sets:
        try:
            arm_per_class: dict[str, dict[str, float]] = {}
            arm_overall: dict[str, float] = {}
            for arm, params in (
                ("baseline", theta0),
                *((("standard", theta_std),) if theta_std is not None else ()),
                ("counterfactual", blended),
            ):
                classifier_backend.set_parameters(params)
                per_class = _per_class_acc5(eval_set, classifier_backend)
                arm_overall[arm] = mean_acc5(eval_set, classifier_backend)
                for cls_name, acc in per_class.items():
                    arm_per_class.setdefault(cls_name, {})[arm] = acc
            comparisons[eval_set.name] = ComparisonReport(
                set_name=eval_set.name,
                per_class=arm_per_class,
                overall=arm_overall,
                model_name=classifier_backend.descriptor.name,
                arms=arms,
                metadata={"alpha": alpha},
            )
        except Exception as exc:
            comparisons[eval_set.name] = ComparisonReport(
                set_name=eval_set.name, per_class={}, overall={},
                model_name=classifier_backend.descriptor.name, arms=arms,
                metadata={"error": str(exc)},
            )
    classifier_backend.set_parameters(blended)
    return blended, comparisons, record


# -- standard augmentation arm ---------------------------------------------

def augment_standard(labeled_set: LabeledSet, seed: int = 0,
                     n_per_item: int = 1) -> LabeledSet:
    """Classic augmentation pipeline: flips, rotation, masking, crop, color jitter."""
    rng = np.random.default_rng(seed)
    items = []
    for image, gt in labeled_set.items:
        for j in range(n_per_item):
            arr = image.data.copy()
            if rng.random() < 0.5:
                arr = arr[:, :, ::-1]
            if rng.random() < 0.5:
                arr = arr[:, ::-1, :]
            k = int(rng.integers(4))
            if k:
                arr = np.rot90(arr, k, axes=(1, 2))
            if rng.random() < 0.5:
                h, w = arr.shape[1:]
                mh, mw = max(1, h // 4), max(1, w // 4)
                r0 = int(rng.integers(h - mh + 1))
                c0 = int(rng.integers(w - mw + 1))
                arr[:, r0:r0 + mh, c0:c0 + mw] = 0.0
            if rng.random() < 0.5:
                h, w = arr.shape[1:]
                ch, cw = int(0.8 * h), int(0.8 * w)
                r0 = int(rng.integers(h - ch + 1))
                c0 = int(rng.integers(w - cw + 1))
                crop = arr[:, r0:r0 + ch, c0:c0 + cw]
                ri = (np.arange(h) * ch // h)
                ci = (np.arange(w) * cw // w)
                arr = crop[:, ri][:, :, ci]
            # Brightness / contrast / saturation jitter.
            arr = arr + rng.uniform(-0.1, 0.1)
            arr = 0.5 + (1.0 + rng.uniform(-0.2, 0.2)) * (arr - 0.5)
            gray = arr.mean(axis=0, keepdims=True)
            sat = 1.0 + rng.uniform(-0.2, 0.2)
            arr = gray + sat * (arr - gray)
            arr = np.ascontiguousarray(np.clip(arr, 0.0, 1.0))
            items.append((ImageTensor(arr, f"{image.id}__aug{j}"), gt))
    return LabeledSet(items, f"{labeled_set.name}_augmented", labeled_set.class_universe)
