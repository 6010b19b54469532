"""Runtime monitoring loop: ingest frames, detect, alert above threshold."""

from __future__ import annotations

import hashlib
import io
import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import requests
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from PIL import Image, UnidentifiedImageError

from .errors import InvalidInputError, SpillkitError
from .geometry import BBox, Detection


@dataclass(frozen=True)
class FrameEvent:
    source_id: str
    timestamp: float
    image_ref: str
    content_hash: str = ""
    late: bool = False  # timestamp regressed for its source


@dataclass
class SeverityRule:
    """Score/area tiers; medium also covers tiny boxes that score high."""

    low_below: float = 0.7
    high_from: float = 0.9
    small_area_fraction: float = 0.01

    def classify(self, score: float, bbox_area: float, frame_area: float) -> str:
        if score < self.low_below:
            return "low"
        if score < self.high_from:
            return "medium"
        if frame_area > 0 and bbox_area < self.small_area_fraction * frame_area:
            return "medium"
        return "high"


@dataclass
class ThresholdPolicy:
    """Per-class confidence thresholds with a default; optional min area."""

    default_threshold: float = 0.5
    per_class: dict = field(default_factory=dict)
    min_bbox_area: float | None = None
    severity: SeverityRule = field(default_factory=SeverityRule)

    def __post_init__(self):
        for name, t in list(self.per_class.items()) + [
                ("default", self.default_threshold)]:
            if not (0.0 <= t <= 1.0):
                raise InvalidInputError(f"threshold {t} for {name!r} outside [0, 1]")

    def threshold_for(self, class_id) -> float:
        return self.per_class.get(class_id, self.default_threshold)

    def admits(self, det: Detection) -> bool:
        if det.score < self.threshold_for(det.class_id):
            return False
        if self.min_bbox_area is not None and det.bbox.area < self.min_bbox_area:
            return False
        return True


@dataclass
class AlertRecord:
    alert_id: str
    source_id: str
    timestamp: float
    class_id: object
    bbox: BBox
    score: float
    severity: str

    def to_dict(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "source_id": self.source_id,
            "timestamp": self.timestamp,
            "class_id": self.class_id,
            "bbox": [self.bbox.x_min, self.bbox.y_min,
                     self.bbox.x_max, self.bbox.y_max],
            "score": self.score,
            "severity": self.severity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlertRecord":
        return cls(alert_id=d["alert_id"], source_id=d["source_id"],
                   timestamp=d["timestamp"], class_id=d["class_id"],
                   bbox=BBox(*d["bbox"]), score=d["score"],
                   severity=d["severity"])


class DetectionLog:
    """Append-only JSON-lines log of every frame outcome."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(ln) for ln in self.path.read_text().splitlines()
                if ln.strip()]


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (OSError, UnidentifiedImageError, ValueError):
        return False


class DirectoryWatcher:
    """Polls a directory for new images; content-hash duplicates suppressed."""

    def __init__(self, directory: str | Path, source_id: str = "dir",
                 interval: float = 1.0,
                 on_skip: Callable[[str, str], None] | None = None):
        self.directory = Path(directory)
        self.source_id = source_id
        self.interval = interval
        self.on_skip = on_skip
        self._seen_paths: set[str] = set()
        self._seen_hashes: set[str] = set()
        self._last_ts: float | None = None

    def scan(self) -> list[FrameEvent]:
        """One polling pass; returns the new frame events."""
        events: list[FrameEvent] = []
        for path in sorted(self.directory.iterdir()):
            if not path.is_file() or str(path) in self._seen_paths:
                continue
            self._seen_paths.add(str(path))
            if not _decodable(path):
                if self.on_skip is not None:
                    self.on_skip(str(path), "undecodable")
                continue
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest in self._seen_hashes:
                continue
            self._seen_hashes.add(digest)
            ts = path.stat().st_mtime
            late = self._last_ts is not None and ts < self._last_ts
            self._last_ts = max(ts, self._last_ts or ts)
            events.append(FrameEvent(source_id=self.source_id, timestamp=ts,
                                     image_ref=str(path), content_hash=digest,
                                     late=late))
        return events

    def watch(self, stop: threading.Event) -> Iterator[FrameEvent]:
        while not stop.is_set():
            yield from self.scan()
            stop.wait(self.interval)


class FrameDetector(Protocol):
    """Detector facade used by the loop; may raise on backend failure."""

    def detect_frame(self, image_ref: str) -> list[Detection]: ...


def evaluate_frame(
    event: FrameEvent,
    detector: FrameDetector,
    policy: ThresholdPolicy,
    log: DetectionLog | None = None,
    frame_area: float = 0.0,
) -> list[AlertRecord]:
    """Run detection on one frame and emit alerts passing the policy.

    The outcome is appended to the detection log whether or not any alert
    fires; a failed detection yields no alerts (fail-closed) but is logged.
    """
    entry = {
        "source_id": event.source_id,
        "timestamp": event.timestamp,
        "image_ref": event.image_ref,
    }
    try:
        detections = detector.detect_frame(event.image_ref)
    except SpillkitError as exc:
        entry.update(status="failed", error=str(exc), detections=[], alerts=[])
        if log is not None:
            log.append(entry)
        return []

    alerts: list[AlertRecord] = []
    for det in detections:
        if policy.admits(det):
            severity = policy.severity.classify(det.score, det.bbox.area,
                                                frame_area)
            alerts.append(AlertRecord(
                alert_id=uuid.uuid4().hex,
                source_id=event.source_id,
                timestamp=event.timestamp,
                class_id=det.class_id,
                bbox=det.bbox,
                score=det.score,
                severity=severity,
            ))
    entry.update(
        status="ok",
        detections=[{
            "class_id": d.class_id, "score": d.score,
            "bbox": [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
        } for d in detections],
        alerts=[a.alert_id for a in alerts],
    )
    if log is not None:
        log.append(entry)
    return alerts


class AlertSink(Protocol):
    def deliver(self, record: AlertRecord) -> None: ...


class FileSink:
    """Append-only JSON-lines alert log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def deliver(self, record: AlertRecord) -> None:
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def records(self) -> list[AlertRecord]:
        if not self.path.exists():
            return []
        return [AlertRecord.from_dict(json.loads(ln))
                for ln in self.path.read_text().splitlines() if ln.strip()]


class WebhookSink:
    """POSTs the alert JSON to a webhook URL."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout
        self.session = requests.Session()

    def deliver(self, record: AlertRecord) -> None:
        try:
            resp = self.session.post(self.url, json=record.to_dict(),
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise SpillkitError(str(exc)) from exc
        if resp.status_code >= 400:
            raise SpillkitError(f"webhook HTTP {resp.status_code}")


@dataclass
class DeliveryResult:
    sink: str
    delivered: bool
    attempts: int
    error: str | None = None


def dispatch_alert(
    record: AlertRecord,
    sinks: Sequence[AlertSink],
    max_attempts: int = 3,
    backoff: float = 0.5,
    dead_letter: str | Path | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[DeliveryResult]:
    """At-least-once delivery to every sink, with retry and dead-lettering."""
    if not sinks:
        raise InvalidInputError("at least one alert sink must be configured")
    results: list[DeliveryResult] = []
    for sink in sinks:
        name = type(sink).__name__
        attempts = 0
        error = None
        while attempts < max_attempts:
            attempts += 1
            try:
                sink.deliver(record)
                results.append(DeliveryResult(name, True, attempts))
                break
            except Exception as exc:
                error = str(exc)
                if attempts < max_attempts:
                    sleep(backoff * 2 ** (attempts - 1))
        else:
            results.append(DeliveryResult(name, False, attempts, error))
    if dead_letter is not None and not any(r.delivered for r in results):
        with Path(dead_letter).open("a") as fh:
            fh.write(json.dumps({
                "record": record.to_dict(),
                "failures": [r.__dict__ for r in results],
            }, sort_keys=True) + "\n")
    return results


class MonitorLoop:
    """Three-stage pipeline: ingest -> detect -> dispatch, bounded queues."""

    def __init__(self, watcher: DirectoryWatcher, detector: FrameDetector,
                 policy: ThresholdPolicy, sinks: Sequence[AlertSink],
                 log: DetectionLog, queue_size: int = 64,
                 dead_letter: str | Path | None = None):
        self.watcher = watcher
        self.detector = detector
        self.policy = policy
        self.sinks = list(sinks)
        self.log = log
        self.dead_letter = dead_letter
        self._frames: queue.Queue = queue.Queue(maxsize=queue_size)
        self._alerts: queue.Queue = queue.Queue(maxsize=queue_size)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _ingest(self):
        for event in self.watcher.watch(self._stop):
            self._frames.put(event)

    def _detect(self):
        while not self._stop.is_set() or not self._frames.empty():
            try:
                event = self._frames.get(timeout=0.1)
            except queue.Empty:
                continue
            for alert in evaluate_frame(event, self.detector, self.policy,
                                        self.log):
                self._alerts.put(alert)

    def _dispatch(self):
        while not self._stop.is_set() or not self._alerts.empty():
            try:
                alert = self._alerts.get(timeout=0.1)
            except queue.Empty:
                continue
            dispatch_alert(alert, self.sinks, dead_letter=self.dead_letter)

    def start(self):
        for fn in (self._ingest, self._detect, self._dispatch):
            t = threading.Thread(target=fn, daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)


def create_frame_endpoint(handler: Callable[[FrameEvent], None],
                          spool_dir: str | Path):
    """FastAPI app exposing POST /frames (multipart image + source_id)."""
    spool = Path(spool_dir)
    spool.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="frame-ingest")
    seen_hashes: set[str] = set()

    @app.post("/frames")
    async def post_frame(image: UploadFile = File(...),
                         source_id: str = Form(...)):
        data = await image.read()
        try:
            Image.open(io.BytesIO(data)).verify()
        except (OSError, UnidentifiedImageError, ValueError):
            raise HTTPException(status_code=400, detail="undecodable image")
        digest = hashlib.sha256(data).hexdigest()
        if digest in seen_hashes:
            return {"status": "duplicate", "hash": digest}
        seen_hashes.add(digest)
        path = spool / f"{digest}.png"
        path.write_bytes(data)
        event = FrameEvent(source_id=source_id, timestamp=time.time(),
                           image_ref=str(path), content_hash=digest)
        handler(event)
        return {"status": "accepted", "hash": digest}

    return app
