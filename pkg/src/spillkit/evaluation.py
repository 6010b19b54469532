"""Evaluation harness: drive detection over a split, compute metrics, report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

from . import geometry
from .config import ClassRegistry
from .datasets import CocoDataset
from .errors import (
    ComparisonError,
    CoverageError,
    EmptyInputError,
    InconsistencyError,
)
from .geometry import BBox, Detection, GroundTruth, SweepCurve
from .vlm import ChatBackend, DecodingParams, ReplayLog, parse_response

DEFAULT_SWEEP = (0.5, 0.6, 0.7, 0.8, 0.9)


class DetectorSource(Protocol):
    """Produces detections for one evaluation image; may raise on failure."""

    def detect_image(self, image_id, image_ref: str,
                     size: tuple[float, float]) -> list[Detection]: ...


class OracleDetector:
    """Returns the ground truth itself; upper-bound sanity detector."""

    def __init__(self, gts_by_image: dict):
        self.gts_by_image = gts_by_image

    def detect_image(self, image_id, image_ref, size) -> list[Detection]:
        return [Detection(bbox=gt.bbox, class_id=gt.class_id, score=1.0)
                for gt in self.gts_by_image.get(image_id, [])]


class ReplayDetector:
    """Re-parses logged VLM responses; no backend traffic."""

    def __init__(self, log: ReplayLog, class_names: Sequence[str],
                 registry: ClassRegistry | None = None,
                 ceiling: float = 1000.0):
        self.responses = log.lookup()
        self.class_names = list(class_names)
        self.registry = registry
        self.ceiling = ceiling

    def check_coverage(self, image_refs: Sequence[str]) -> None:
        missing = [ref for ref in image_refs
                   if not any((ref, c) in self.responses for c in self.class_names)]
        if missing:
            raise CoverageError(
                f"replay log has no entries for {len(missing)} images: "
                f"{missing[:10]}", ids=missing)

    def detect_image(self, image_id, image_ref, size) -> list[Detection]:
        out: list[Detection] = []
        for name in self.class_names:
            text = self.responses.get((image_ref, name))
            if text is None:
                continue
            class_id = self.registry.id_of(name) if self.registry else name
            parsed = parse_response(text, size[0], size[1], self.ceiling,
                                    default_class=class_id)
            out.extend(parsed.detections)
        return out


class CocoResultsDetector:
    """Imports an external detector's COCO results array."""

    def __init__(self, results: Sequence[dict] | str | Path):
        if not isinstance(results, (list, tuple)):
            results = json.loads(Path(results).read_text())
        self.by_image: dict = {}
        for rec in results:
            det = Detection(
                bbox=BBox.from_xywh(*rec["bbox"]),
                class_id=rec["category_id"],
                score=rec.get("score", 1.0),
            )
            self.by_image.setdefault(rec["image_id"], []).append(det)

    def detect_image(self, image_id, image_ref, size) -> list[Detection]:
        return self.by_image.get(image_id, [])


class LiveVlmDetector:
    """Queries a chat backend once per registered class per image."""

    def __init__(self, backend: ChatBackend, registry: ClassRegistry,
                 class_names: Sequence[str] | None = None,
                 params: DecodingParams = DecodingParams(),
                 replay_log: ReplayLog | None = None,
                 ceiling: float = 1000.0):
        from . import vlm
        self._vlm = vlm
        self.backend = backend
        self.registry = registry
        self.class_names = list(class_names or registry.names)
        self.params = params
        self.replay_log = replay_log
        self.ceiling = ceiling

    def detect_image(self, image_id, image_ref, size) -> list[Detection]:
        out: list[Detection] = []
        for name in self.class_names:
            parsed = self._vlm.detect(
                image_ref, name, self.backend, self.params,
                image_size=size, ceiling=self.ceiling,
                replay_log=self.replay_log,
                class_id=self.registry.id_of(name))
            out.extend(parsed.detections)
        return out


@dataclass
class EvalRun:
    """Predictions gathered for one method over one split."""

    dataset_ref: str
    method: str
    predictions: dict  # image_id -> list[Detection]
    failed_images: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    """Metric bundle for one (method, column) cell of the result tables.

    hit_rate is the class-mean (primary); hit_rate_micro pools all
    image-class pairs.
    """

    method: str
    column: str = ""
    dataset_ref: str = ""
    tau: float = 0.5
    hit_rate: float = 0.0
    hit_rate_micro: float = 0.0
    per_class: dict = field(default_factory=dict)
    map50: float = 0.0
    sweep: SweepCurve | None = None
    skipped_classes: list = field(default_factory=list)
    failed_images: list = field(default_factory=list)
    uplift_vs: str | None = None
    uplift_pct: float | None = None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "column": self.column,
            "dataset_ref": self.dataset_ref,
            "tau": self.tau,
            "hit_rate": self.hit_rate,
            "hit_rate_micro": self.hit_rate_micro,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "map50": self.map50,
            "skipped_classes": [str(c) for c in self.skipped_classes],
            "failed_images": [str(i) for i in self.failed_images],
        }
        if self.sweep is not None:
            out["sweep"] = {"thresholds": list(self.sweep.thresholds),
                            "hit_rates": list(self.sweep.hit_rates)}
        if self.uplift_pct is not None:
            out["uplift_vs"] = self.uplift_vs
            out["uplift_pct"] = self.uplift_pct
        return out


def ground_truths_from_coco(dataset: CocoDataset) -> dict:
    """image_id -> list of GroundTruth from a parsed COCO dataset."""
    out: dict = {}
    for ann in dataset.annotations:
        gt = GroundTruth(bbox=BBox.from_xywh(*ann["bbox"]),
                         class_id=ann["category_id"])
        out.setdefault(ann["image_id"], []).append(gt)
    return out


def _metrics_from_samples(samples, tau, sweep_thresholds, matching):
    outcomes = geometry.hit_outcomes(samples, tau, matching)
    if not outcomes:
        raise EmptyInputError("evaluation split has no ground-truth boxes")
    micro = sum(h for _, h in outcomes) / len(outcomes)
    per_class: dict = {}
    for class_id, hit in outcomes:
        per_class.setdefault(class_id, []).append(hit)
    per_class = {c: sum(v) / len(v) for c, v in per_class.items()}
    class_mean = sum(per_class.values()) / len(per_class)
    aps, skipped = geometry.ap_per_class(samples, tau)
    m = sum(aps.values()) / len(aps) if aps else 0.0
    curve = None
    if sweep_thresholds:
        curve = geometry.sweep(samples, sweep_thresholds, matching)
    return class_mean, micro, per_class, m, curve, skipped


def run_eval(
    dataset: CocoDataset,
    split_ids: Sequence,
    detector: DetectorSource,
    method: str = "method",
    dataset_ref: str = "dataset",
    tau: float = 0.5,
    sweep_thresholds: Sequence[float] | None = DEFAULT_SWEEP,
    matching: str = "best-score",
    on_failure: Callable[[object, Exception], None] | None = None,
) -> tuple[EvalRun, EvalReport]:
    """Evaluate one detector source over a split.

    Per-image detector failures are recorded and count as misses; they
    never abort the run.
    """
    if not split_ids:
        raise EmptyInputError("empty evaluation split")
    gts_by_image = ground_truths_from_coco(dataset)
    index = {img["id"]: img for img in dataset.images}

    if isinstance(detector, ReplayDetector):
        refs = [index[i].get("file_name", str(i)) for i in split_ids]
        detector.check_coverage(refs)

    predictions: dict = {}
    failed: list = []
    samples = []
    for image_id in split_ids:
        img = index[image_id]
        ref = img.get("file_name", str(image_id))
        size = (float(img.get("width", 0) or 0), float(img.get("height", 0) or 0))
        try:
            preds = detector.detect_image(image_id, ref, size)
        except Exception as exc:  # failure isolation: a bad image is a miss
            preds = []
            failed.append(image_id)
            if on_failure is not None:
                on_failure(image_id, exc)
        predictions[image_id] = preds
        samples.append((preds, gts_by_image.get(image_id, [])))

    class_mean, micro, per_class, m, curve, skipped = _metrics_from_samples(
        samples, tau, sweep_thresholds, matching)
    run = EvalRun(dataset_ref=dataset_ref, method=method,
                  predictions=predictions, failed_images=failed,
                  config={"tau": tau, "matching": matching})
    report = EvalReport(
        method=method, dataset_ref=dataset_ref, tau=tau,
        hit_rate=class_mean, hit_rate_micro=micro, per_class=per_class,
        map50=m, sweep=curve, skipped_classes=skipped, failed_images=failed)
    return run, report


def compare(report: EvalReport, baseline: EvalReport) -> EvalReport:
    """Attach relative uplift (percent) against a baseline report."""
    if report.dataset_ref != baseline.dataset_ref:
        raise ComparisonError(
            f"dataset mismatch: {report.dataset_ref!r} vs {baseline.dataset_ref!r}")
    if report.tau != baseline.tau:
        raise ComparisonError(f"tau mismatch: {report.tau} vs {baseline.tau}")
    report.uplift_vs = baseline.method
    report.uplift_pct = geometry.uplift(report.hit_rate, baseline.hit_rate)
    return report


def _format_value(v: float) -> str:
    # repr emits the shortest digits that parse back to the exact float,
    # so tables stay readable and CSV round trips are lossless
    return repr(float(v))


def _grid(reports: Sequence[EvalReport]):
    taus = {r.tau for r in reports}
    if len(taus) > 1:
        raise InconsistencyError(f"mixed IoU thresholds in one table: {sorted(taus)}")
    rows, cols = [], []
    values = {}
    for r in reports:
        if r.method not in rows:
            rows.append(r.method)
        col = r.column or r.dataset_ref or "value"
        if col not in cols:
            cols.append(col)
        values[(r.method, col)] = r.hit_rate
    return rows, cols, values


def render_report(reports: Sequence[EvalReport], fmt: str = "markdown") -> str:
    """Hit-rate table: methods as rows, model/dataset labels as columns."""
    if not reports:
        raise EmptyInputError("no reports to render")
    rows, cols, values = _grid(reports)
    if fmt == "markdown":
        lines = ["| Method | " + " | ".join(cols) + " |",
                 "|---" * (len(cols) + 1) + "|"]
        for method in rows:
            cells = [_format_value(values[(method, c)]) if (method, c) in values
                     else "" for c in cols]
            lines.append("| " + method + " | " + " | ".join(cells) + " |")
        failed = sorted({str(i) for r in reports for i in r.failed_images})
        if failed:
            lines.append("")
            lines.append(f"Failed images (counted as misses): {', '.join(failed)}")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["Method"] + cols)
        for method in rows:
            writer.writerow([method] + [
                _format_value(values[(method, c)]) if (method, c) in values else ""
                for c in cols])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2)
    raise InconsistencyError(f"unknown format {fmt!r}")


def parse_report_csv(text: str) -> dict[tuple[str, str], float]:
    """Inverse of render_report(fmt='csv'); values parse back exactly."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    cols = header[1:]
    out: dict[tuple[str, str], float] = {}
    for row in reader:
        for col, cell in zip(cols, row[1:]):
            if cell:
                out[(row[0], col)] = float(cell)
    return out


def render_sweep_table(curves: dict[str, SweepCurve],
                       fmt: str = "markdown") -> str:
    """Threshold-sweep table: methods as rows, thresholds as columns."""
    if not curves:
        raise EmptyInputError("no sweep curves to render")
    thresholds = None
    for method, curve in curves.items():
        if thresholds is None:
            thresholds = curve.thresholds
        elif curve.thresholds != thresholds:
            raise InconsistencyError("sweep curves use different threshold grids")
    cols = [repr(round(t, 10)) for t in thresholds]
    if fmt == "markdown":
        lines = ["| Method | " + " | ".join(cols) + " |",
                 "|---" * (len(cols) + 1) + "|"]
        for method, curve in curves.items():
            lines.append("| " + method + " | "
                         + " | ".join(_format_value(v) for v in curve.hit_rates)
                         + " |")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["Method"] + cols)
        for method, curve in curves.items():
            writer.writerow([method] + [_format_value(v) for v in curve.hit_rates])
        return buf.getvalue()
    raise InconsistencyError(f"unknown format {fmt!r}")
