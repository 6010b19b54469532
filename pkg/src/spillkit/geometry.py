"""Pure geometric and metric kernels: IoU, hit rates, sweeps, AP, uplift.

Everything in this module is a pure function over immutable inputs and is
safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

from .errors import (
    EmptyInputError,
    InvalidGeometryError,
    InvalidInputError,
    InvalidThresholdError,
)

ClassId = Hashable


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image pixel coordinates, origin top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidGeometryError(f"non-finite coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidGeometryError(f"inverted box: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]


@dataclass(frozen=True)
class Detection:
    """A scored, classed prediction."""

    bbox: BBox
    class_id: ClassId
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    class_id: ClassId


# One evaluation image: its predictions and its ground truths.
ImageSample = tuple[Sequence[Detection], Sequence[GroundTruth]]


@dataclass(frozen=True)
class SweepCurve:
    """Hit rate as a function of IoU threshold."""

    thresholds: tuple[float, ...]
    hit_rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.thresholds) != len(self.hit_rates):
            raise InvalidInputError("thresholds and hit_rates differ in length")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise InvalidInputError("thresholds must be strictly increasing")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _check_tau(tau: float) -> None:
    if not (0.0 < tau <= 1.0):
        raise InvalidThresholdError(f"IoU threshold {tau} outside (0, 1]")


def is_hit(pred: BBox, gt: BBox, tau: float) -> bool:
    """Boundary-inclusive hit rule: IoU >= tau counts."""
    _check_tau(tau)
    return iou(pred, gt) >= tau


def hit_outcomes(
    images: Iterable[ImageSample],
    tau: float,
    matching: str = "best-score",
) -> list[tuple[ClassId, bool]]:
    """Per image-class hit decisions.

    One outcome per (image, class) pair that has at least one ground truth.
    With matching="best-score" only the highest-score prediction of that
    class is tested (single-object query protocol); "greedy" lets any
    prediction of the class score the hit.
    """
    _check_tau(tau)
    if matching not in ("best-score", "greedy"):
        raise InvalidInputError(f"unknown matching rule: {matching}")
    outcomes: list[tuple[ClassId, bool]] = []
    for preds, gts in images:
        by_class: dict[ClassId, list[GroundTruth]] = {}
        for gt in gts:
            by_class.setdefault(gt.class_id, []).append(gt)
        for class_id, class_gts in by_class.items():
            candidates = [p for p in preds if p.class_id == class_id]
            if matching == "best-score" and candidates:
                candidates = [max(candidates, key=lambda p: p.score)]
            hit = any(
                iou(p.bbox, gt.bbox) >= tau
                for p in candidates
                for gt in class_gts
            )
            outcomes.append((class_id, hit))
    return outcomes


def mean_hit_rate(
    images: Sequence[ImageSample],
    tau: float,
    matching: str = "best-score",
) -> float:
    """Fraction of ground-truth image-class pairs whose prediction hits."""
    outcomes = hit_outcomes(images, tau, matching)
    if not outcomes:
        raise EmptyInputError("no ground-truth boxes in the evaluation set")
    return sum(hit for _, hit in outcomes) / len(outcomes)


def sweep(
    images: Sequence[ImageSample],
    thresholds: Sequence[float],
    matching: str = "best-score",
) -> SweepCurve:
    """Hit rate at each threshold; thresholds must be strictly increasing."""
    if not thresholds:
        raise InvalidInputError("empty threshold list")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise InvalidInputError("thresholds must be strictly increasing")
    for t in thresholds:
        _check_tau(t)
    rates = tuple(mean_hit_rate(images, t, matching) for t in thresholds)
    return SweepCurve(tuple(thresholds), rates)


def _ap_all_points(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP from ranked TP flags."""
    if n_gt == 0:
        raise InvalidInputError("AP undefined with zero ground truths")
    if not tp_flags:
        return 0.0
    tp = fp = 0
    recalls, precisions = [], []
    for flag in tp_flags:
        tp += flag
        fp += not flag
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    # precision envelope: running max from the right
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recalls, precisions):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def ap_per_class(
    images: Sequence[ImageSample],
    tau: float = 0.5,
) -> tuple[dict[ClassId, float], list[ClassId]]:
    """Average precision per class at one IoU threshold.

    Returns (ap by class, classes skipped for having zero ground truths).
    Detections are ranked globally by descending score and matched greedily
    within their image.
    """
    _check_tau(tau)
    gt_classes: set[ClassId] = set()
    det_classes: set[ClassId] = set()
    for preds, gts in images:
        gt_classes.update(gt.class_id for gt in gts)
        det_classes.update(p.class_id for p in preds)
    skipped = sorted(det_classes - gt_classes, key=str)

    aps: dict[ClassId, float] = {}
    for class_id in gt_classes:
        ranked: list[tuple[float, int, int, Detection]] = []
        per_image_gts: list[list[GroundTruth]] = []
        n_gt = 0
        for img_idx, (preds, gts) in enumerate(images):
            class_gts = [g for g in gts if g.class_id == class_id]
            per_image_gts.append(class_gts)
            n_gt += len(class_gts)
            for det_idx, p in enumerate(preds):
                if p.class_id == class_id:
                    ranked.append((-p.score, img_idx, det_idx, p))
        ranked.sort(key=lambda t: (t[0], t[1], t[2]))

        matched = [[False] * len(g) for g in per_image_gts]
        flags = []
        for _, img_idx, _, pred in ranked:
            gts = per_image_gts[img_idx]
            taken = matched[img_idx]
            best, best_iou = -1, 0.0
            for j, gt in enumerate(gts):
                if taken[j]:
                    continue
                v = iou(pred.bbox, gt.bbox)
                if v >= tau and v > best_iou:
                    best, best_iou = j, v
            if best >= 0:
                taken[best] = True
                flags.append(True)
            else:
                flags.append(False)
        aps[class_id] = _ap_all_points(flags, n_gt)
    return aps, skipped


def map50(images: Sequence[ImageSample], tau: float = 0.5) -> float:
    """Mean over classes of average precision at IoU >= tau."""
    aps, _ = ap_per_class(images, tau)
    if not aps:
        return 0.0
    return sum(aps.values()) / len(aps)


def uplift(hr_method: float, hr_zeroshot: float) -> float:
    """Relative hit-rate improvement over the zero-shot baseline, percent."""
    if hr_zeroshot == 0:
        raise ZeroDivisionError(
            "zero-shot hit rate is 0; relative uplift is undefined"
        )
    # rounding at the 10th decimal removes float noise ten orders of
    # magnitude below reporting precision (e.g. 80.00000000000001 -> 80.0)
    return round((hr_method - hr_zeroshot) / hr_zeroshot * 100.0, 10)
