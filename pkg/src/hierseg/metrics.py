"""Segmentation quality metrics: per-class IoU, per-level and average mIoU,
confusion matrices, and cross-level prediction consistency.

Classes that appear in neither truth nor prediction have no defined IoU; they
are marked ``None`` and excluded from means rather than counted as zero, so
small scenes stay comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenegen import Scene
from .taxonomy import HierarchySpec, all_mappings


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with truth on rows and prediction on columns, shape (K, K)."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError("pred and truth must be 1-d arrays of equal length")
    if pred.size == 0:
        return np.zeros((num_classes, num_classes), dtype=np.int64)
    if pred.min() < 0 or pred.max() >= num_classes or truth.min() < 0 or truth.max() >= num_classes:
        raise ValueError(f"labels out of range for {num_classes} classes")
    flat = truth * num_classes + pred
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou(confusion: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where undefined) and the mean over defined classes."""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError("confusion must be square")
    tp = np.diag(confusion)
    denom = confusion.sum(axis=1) + confusion.sum(axis=0) - tp
    iou = np.full(confusion.shape[0], np.nan)
    defined = denom > 0
    iou[defined] = tp[defined] / denom[defined]
    mean = float(np.nanmean(iou)) if defined.any() else float("nan")
    return iou, mean


@dataclass
class MetricsReport:
    """Evaluation summary across a scene collection."""

    class_names: list[list[str]]
    confusion_per_level: list[np.ndarray]
    iou_per_class: list[list[float | None]]
    miou_per_level: list[float]
    avg_miou: float
    consistency_per_level: list[float]  # adjacent level pairs, finest side 1..H-1

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "confusion_per_level": [c.tolist() for c in self.confusion_per_level],
            "iou_per_class": self.iou_per_class,
            "miou_per_level": self.miou_per_level,
            "avg_miou": self.avg_miou,
            "consistency_per_level": self.consistency_per_level,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            class_names=data["class_names"],
            confusion_per_level=[np.asarray(c, dtype=np.int64) for c in data["confusion_per_level"]],
            iou_per_class=data["iou_per_class"],
            miou_per_level=data["miou_per_level"],
            avg_miou=data["avg_miou"],
            consistency_per_level=data["consistency_per_level"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def truth_counts(self, level: int) -> np.ndarray:
        """Ground-truth point count per class (confusion row sums)."""
        return self.confusion_per_level[level].sum(axis=1)

    def format_table(self) -> str:
        """mIoU per level plus the average, in percent with two decimals."""
        lines = ["level    mIoU(%)"]
        for h, value in enumerate(self.miou_per_level):
            lines.append(f"L{h:<7d} {100.0 * value:6.2f}")
        lines.append(f"average  {100.0 * self.avg_miou:6.2f}")
        for h, rate in enumerate(self.consistency_per_level, start=1):
            lines.append(f"consistency L{h - 1}->L{h}: {rate:.4f}")
        return "\n".join(lines)


def evaluate(model, scenes: list[Scene], spec: HierarchySpec) -> MetricsReport:
    """Run inference over scenes and aggregate metrics per level.

    ``model`` needs a ``predict_probs(scene) -> list[np.ndarray]`` method.
    Predicted labels are the per-level argmax of the probabilities.
    """
    if not scenes:
        raise ValueError("empty scene list")
    model_counts = getattr(getattr(model, "config", None), "class_counts", None)
    if model_counts is not None and tuple(model_counts) != spec.class_counts:
        raise ValueError(
            f"taxonomy mismatch: model was built for class counts {tuple(model_counts)}, "
            f"dataset taxonomy has {spec.class_counts}"
        )
    for scene in scenes:
        scene.validate_against(spec)

    num_levels = spec.num_levels
    counts = spec.class_counts
    confusion = [np.zeros((k, k), dtype=np.int64) for k in counts]
    mappings = all_mappings(spec)
    consistent = np.zeros(num_levels - 1, dtype=np.int64)
    total_points = 0

    for scene in scenes:
        probs = model.predict_probs(scene)
        if len(probs) != num_levels or any(p.shape[1] != k for p, k in zip(probs, counts)):
            raise ValueError(
                f"taxonomy mismatch: model emitted class counts "
                f"{tuple(p.shape[1] for p in probs)}, dataset taxonomy has {counts}"
            )
        preds = [p.argmax(axis=1) for p in probs]
        total_points += scene.num_points
        for h in range(num_levels):
            confusion[h] += confusion_matrix(preds[h], scene.labels[h], counts[h])
        for h in range(1, num_levels):
            consistent[h - 1] += int(
                mappings[h - 1].entries[preds[h], preds[h - 1]].sum()
            )

    iou_per_class: list[list[float | None]] = []
    miou_per_level: list[float] = []
    for h in range(num_levels):
        iou, mean = miou(confusion[h])
        iou_per_class.append([None if np.isnan(v) else float(v) for v in iou])
        miou_per_level.append(mean)

    return MetricsReport(
        class_names=[list(names) for names in spec.class_names],
        confusion_per_level=confusion,
        iou_per_class=iou_per_class,
        miou_per_level=miou_per_level,
        avg_miou=float(np.mean(miou_per_level)),
        consistency_per_level=[float(c / total_points) for c in consistent],
    )
