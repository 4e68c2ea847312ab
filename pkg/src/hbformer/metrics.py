"""Hard-mask overlap metrics: Dice similarity (DSC) and intersection over union."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_pair(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def dsc(pred_mask, target_mask, class_id: int, num_classes: int | None = None) -> float:
    """``2|P & G| / (|P| + |G|)`` for one class; 1.0 when the class is absent from both."""
    pred, target = _check_pair(pred_mask, target_mask)
    if class_id < 0 or (num_classes is not None and class_id >= num_classes):
        raise ValueError(f"unknown class id {class_id}")
    p = pred == class_id
    g = target == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2 * int((p & g).sum()) / denom


def miou(pred_mask, target_mask, num_classes: int) -> float:
    """Mean IoU over classes, skipping classes absent from both masks."""
    pred, target = _check_pair(pred_mask, target_mask)
    counts = ConfusionCounts.from_masks(pred, target, num_classes)
    return counts.miou()


@dataclass
class ConfusionCounts:
    """Per-class pixel tallies, additive over samples."""

    num_classes: int
    intersection: np.ndarray = None
    pred_total: np.ndarray = None
    target_total: np.ndarray = None

    def __post_init__(self):
        for name in ("intersection", "pred_total", "target_total"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, np.int64))

    @classmethod
    def from_masks(cls, pred, target, num_classes: int) -> "ConfusionCounts":
        pred = np.asarray(pred).reshape(-1)
        target = np.asarray(target).reshape(-1)
        for name, m in (("prediction", pred), ("target", target)):
            if m.size and (m.min() < 0 or m.max() >= num_classes):
                raise ValueError(f"{name} label out of range for {num_classes} classes")
        hit = pred[pred == target]
        return cls(
            num_classes,
            np.bincount(hit, minlength=num_classes).astype(np.int64),
            np.bincount(pred, minlength=num_classes).astype(np.int64),
            np.bincount(target, minlength=num_classes).astype(np.int64),
        )

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.num_classes,
            self.intersection + other.intersection,
            self.pred_total + other.pred_total,
            self.target_total + other.target_total,
        )

    def dsc(self) -> np.ndarray:
        denom = self.pred_total + self.target_total
        out = np.ones(self.num_classes)
        nz = denom > 0
        out[nz] = 2 * self.intersection[nz] / denom[nz]
        return out

    def iou(self) -> np.ndarray:
        union = self.pred_total + self.target_total - self.intersection
        out = np.ones(self.num_classes)
        nz = union > 0
        out[nz] = self.intersection[nz] / union[nz]
        return out

    def present(self) -> np.ndarray:
        return (self.pred_total + self.target_total) > 0

    def miou(self) -> float:
        present = self.present()
        if not present.any():
            return 1.0
        return float(self.iou()[present].mean())


@dataclass
class MetricsReport:
    """Per-class scores plus their means.

    ``mean_dsc`` averages the foreground classes (``1..C-1``); ``miou`` averages
    every class that occurs in the prediction or the target.
    """

    per_class_dsc: list[float]
    per_class_iou: list[float]
    mean_dsc: float
    miou: float
    count: int
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, count: int, seed=None) -> "MetricsReport":
        d = counts.dsc()
        fg = d[1:] if counts.num_classes > 1 else d
        return cls(
            per_class_dsc=[float(v) for v in d],
            per_class_iou=[float(v) for v in counts.iou()],
            mean_dsc=float(fg.mean()),
            miou=counts.miou(),
            count=count,
            seed=seed,
        )

    @property
    def num_classes(self) -> int:
        return len(self.per_class_dsc)


def aggregate(reports: list[MetricsReport]) -> dict[str, np.ndarray]:
    """Mean and sample standard deviation (ddof 1) of every score across runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    dsc_rows = np.array([r.per_class_dsc for r in reports])
    iou_rows = np.array([r.per_class_iou for r in reports])
    means = np.array([[r.mean_dsc, r.miou] for r in reports])
    ddof = 1 if len(reports) > 1 else 0
    return {
        "class_dsc_mean": dsc_rows.mean(axis=0),
        "class_dsc_std": dsc_rows.std(axis=0, ddof=ddof),
        "class_iou_mean": iou_rows.mean(axis=0),
        "class_iou_std": iou_rows.std(axis=0, ddof=ddof),
        "mean": means.mean(axis=0),
        "std": means.std(axis=0, ddof=ddof),
    }
