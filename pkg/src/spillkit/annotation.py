"""Expert-in-the-loop annotation backend: tasks, placements, review loop."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from fastapi import FastAPI, Header, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel

from .config import ClassRegistry, GenerationProfile
from .diffusion import InpaintJob, build_inpaint_job
from .errors import (
    GeometryMismatchError,
    StateError,
    UnknownClassError,
    ValidationError,
)
from .geometry import BBox
from .masks import MaskSpec, write_mask_with_sidecar

VALID_STATUSES = ("pending", "annotated", "inpainted", "accepted",
                  "rejected", "parked")
MAX_REINPAINT_ATTEMPTS = 3


@dataclass
class Placement:
    bbox: BBox
    class_name: str
    rationale: str | None = None


@dataclass
class SceneTask:
    scene_id: str
    image_ref: str
    width: int
    height: int
    status: str = "pending"
    annotations: list = field(default_factory=list)
    preview_ref: str | None = None
    created_at: float = field(default_factory=time.time)
    inpaint_attempts: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "image_ref": self.image_ref,
            "width": self.width,
            "height": self.height,
            "status": self.status,
            "annotations": self.annotations,
            "preview_ref": self.preview_ref,
            "created_at": self.created_at,
            "inpaint_attempts": self.inpaint_attempts,
            "seed": self.seed,
        }


class JobQueue(Protocol):
    def enqueue(self, job: InpaintJob) -> None: ...


class ListJobQueue:
    """In-memory queue; production workers drain it, tests inspect it."""

    def __init__(self):
        self.jobs: list[InpaintJob] = []
        self._lock = threading.Lock()

    def enqueue(self, job: InpaintJob) -> None:
        with self._lock:
            self.jobs.append(job)


def _derived_seed(scene_id: str, attempt: int, index: int = 0) -> int:
    digest = hashlib.sha256(f"{scene_id}:{attempt}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class AnnotationService:
    """Task store with a strict scene state machine and COCO persistence.

    Transitions: pending -> annotated -> inpainted -> accepted | rejected;
    rejected scenes either get re-inpainted (-> inpainted) or re-annotated
    (-> annotated); after the re-inpaint budget they are parked.
    """

    def __init__(self, data_dir: str | Path, registry: ClassRegistry,
                 profile: GenerationProfile, job_queue: JobQueue):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.masks_dir = self.data_dir / "masks"
        self.masks_dir.mkdir(exist_ok=True)
        self.registry = registry
        self.profile = profile
        self.job_queue = job_queue
        self.tasks: dict[str, SceneTask] = {}
        self._lock = threading.Lock()  # single writer for tasks + COCO file
        self.coco_path = self.data_dir / "annotations.json"
        self.state_path = self.data_dir / "tasks.json"
        self.corpus_path = self.data_dir / "corpus.json"
        self._load()

    # -- persistence -------------------------------------------------

    def _load(self) -> None:
        if self.state_path.exists():
            for d in json.loads(self.state_path.read_text()):
                self.tasks[d["scene_id"]] = SceneTask(**d)

    def _persist_tasks(self) -> None:
        ordered = sorted(self.tasks.values(), key=lambda t: t.created_at)
        _atomic_write_text(self.state_path,
                           json.dumps([t.to_dict() for t in ordered], indent=2))

    def _coco_document(self) -> dict:
        if self.coco_path.exists():
            return json.loads(self.coco_path.read_text())
        return {"images": [], "annotations": [],
                "categories": self.registry.categories()}

    def _persist_annotations(self, task: SceneTask) -> None:
        doc = self._coco_document()
        doc["images"] = [img for img in doc["images"]
                         if img["id"] != task.scene_id]
        doc["annotations"] = [a for a in doc["annotations"]
                              if a["image_id"] != task.scene_id]
        doc["images"].append({
            "id": task.scene_id,
            "file_name": task.image_ref,
            "width": task.width,
            "height": task.height,
        })
        next_id = max((a["id"] for a in doc["annotations"]), default=0) + 1
        for ann in task.annotations:
            doc["annotations"].append({
                "id": next_id,
                "image_id": task.scene_id,
                "category_id": self.registry.id_of(ann["class_name"]),
                "bbox": ann["bbox"],
                "rationale": ann.get("rationale"),
            })
            next_id += 1
        _atomic_write_text(self.coco_path, json.dumps(doc, indent=2))

    # -- operations --------------------------------------------------

    def add_scene(self, scene_id: str, image_ref: str, width: int,
                  height: int, seed: int = 0) -> SceneTask:
        with self._lock:
            if scene_id in self.tasks:
                raise ValidationError(f"scene {scene_id!r} already exists")
            task = SceneTask(scene_id=scene_id, image_ref=image_ref,
                             width=width, height=height, seed=seed)
            self.tasks[scene_id] = task
            self._persist_tasks()
            return task

    def get(self, scene_id: str) -> SceneTask:
        try:
            return self.tasks[scene_id]
        except KeyError:
            raise ValidationError(f"unknown scene {scene_id!r}") from None

    def list_tasks(self, status: str | None = None, cursor: str | None = None,
                   limit: int = 50) -> dict:
        """Stable page ordered by creation time; cursor-based pagination."""
        if status is not None and status not in VALID_STATUSES:
            raise ValidationError(f"unknown status {status!r}")
        tasks = sorted(self.tasks.values(),
                       key=lambda t: (t.created_at, t.scene_id))
        if status is not None:
            tasks = [t for t in tasks if t.status == status]
        offset = 0
        if cursor is not None:
            try:
                offset = int(cursor)
            except ValueError:
                raise ValidationError(f"bad cursor {cursor!r}") from None
            if offset < 0 or offset > len(tasks):
                raise ValidationError(f"bad cursor {cursor!r}")
        page = tasks[offset:offset + limit]
        next_cursor = str(offset + limit) if offset + limit < len(tasks) else None
        return {"tasks": [t.to_dict() for t in page], "next_cursor": next_cursor}

    def _enqueue_inpaint(self, task: SceneTask, placements: Sequence[dict],
                         attempt: int) -> None:
        for idx, ann in enumerate(placements):
            x, y, w, h = ann["bbox"]
            spec = MaskSpec(bbox=BBox.from_xywh(x, y, w, h),
                            feather_px=self.profile.mask_feather_px,
                            opacity=self.profile.mask_opacity)
            mask_path = self.masks_dir / f"{task.scene_id}-{attempt}-{idx}.png"
            mask = write_mask_with_sidecar(spec, task.width, task.height,
                                           mask_path)
            job = build_inpaint_job(
                scene_ref=task.image_ref,
                scene_size=(task.width, task.height),
                mask_ref=str(mask_path),
                mask_size=(mask.width, mask.height),
                class_name=ann["class_name"],
                registry=self.registry,
                profile=self.profile,
                seed=_derived_seed(task.scene_id, attempt, idx),
            )
            self.job_queue.enqueue(job)

    def submit_placement(self, scene_id: str,
                         placements: Sequence[Placement | dict]) -> SceneTask:
        """Persist expert boxes and enqueue one inpaint job per box."""
        with self._lock:
            task = self.get(scene_id)
            if task.status not in ("pending", "rejected"):
                raise StateError(
                    f"scene {scene_id!r} is {task.status}; placements need "
                    f"a pending or rejected scene")
            if not placements:
                raise ValidationError("placement list is empty")
            normalized = []
            for p in placements:
                if isinstance(p, Placement):
                    bbox, class_name, rationale = p.bbox.to_xywh(), p.class_name, p.rationale
                else:
                    bbox, class_name, rationale = (
                        list(p["bbox"]), p["class_name"], p.get("rationale"))
                x, y, w, h = bbox
                if w <= 0 or h <= 0:
                    raise GeometryMismatchError(f"zero-area bbox {bbox}")
                if x < 0 or y < 0 or x + w > task.width or y + h > task.height:
                    raise GeometryMismatchError(
                        f"bbox {bbox} exceeds scene bounds "
                        f"{task.width}x{task.height}")
                if class_name not in self.registry:
                    raise UnknownClassError(f"unregistered class {class_name!r}")
                normalized.append({"bbox": bbox, "class_name": class_name,
                                   "rationale": rationale})
            task.annotations = normalized
            task.inpaint_attempts += 1
            self._persist_annotations(task)
            self._enqueue_inpaint(task, normalized, task.inpaint_attempts)
            task.status = "annotated"
            self._persist_tasks()
            return task

    def mark_inpainted(self, scene_id: str, preview_ref: str) -> SceneTask:
        """Worker callback once the inpainted preview exists."""
        with self._lock:
            task = self.get(scene_id)
            if task.status not in ("annotated", "rejected"):
                raise StateError(
                    f"scene {scene_id!r} is {task.status}; cannot attach preview")
            task.preview_ref = preview_ref
            task.status = "inpainted"
            self._persist_tasks()
            return task

    def review(self, scene_id: str, verdict: str) -> SceneTask:
        """Accept moves the scene into the corpus; reject re-inpaints."""
        if verdict not in ("accept", "reject"):
            raise ValidationError(f"unknown verdict {verdict!r}")
        with self._lock:
            task = self.get(scene_id)
            if task.status != "inpainted":
                raise StateError(
                    f"scene {scene_id!r} is {task.status}; review needs an "
                    f"inpainted scene")
            if verdict == "accept":
                task.status = "accepted"
                self._append_corpus(task)
            else:
                if task.inpaint_attempts >= MAX_REINPAINT_ATTEMPTS:
                    task.status = "parked"
                else:
                    task.status = "rejected"
                    task.inpaint_attempts += 1
                    self._enqueue_inpaint(task, task.annotations,
                                          task.inpaint_attempts)
            self._persist_tasks()
            return task

    def _append_corpus(self, task: SceneTask) -> None:
        corpus = []
        if self.corpus_path.exists():
            corpus = json.loads(self.corpus_path.read_text())
        corpus.append({
            "scene_id": task.scene_id,
            "image_ref": task.preview_ref or task.image_ref,
            "annotations": task.annotations,
        })
        _atomic_write_text(self.corpus_path, json.dumps(corpus, indent=2))

    def corpus(self) -> list[dict]:
        if self.corpus_path.exists():
            return json.loads(self.corpus_path.read_text())
        return []


class PlacementBody(BaseModel):
    placements: list[dict]


class ReviewBody(BaseModel):
    verdict: str


def create_annotation_app(service: AnnotationService,
                          token: str | None = None,
                          ui_dir: str | Path | None = None):
    """HTTP JSON API over the annotation service, plus the static UI."""
    app = FastAPI(title="annotation-service")

    def check_auth(x_auth_token: str | None):
        if token is not None and x_auth_token != token:
            raise HTTPException(status_code=401, detail="bad token")

    @app.get("/tasks")
    def list_tasks(status: str | None = None, cursor: str | None = None,
                   limit: int = 50, x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        try:
            return service.list_tasks(status=status, cursor=cursor, limit=limit)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/classes")
    def classes(x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        return {"classes": service.registry.categories()}

    @app.get("/scenes/{scene_id}")
    def scene(scene_id: str, x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        try:
            return service.get(scene_id).to_dict()
        except ValidationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/scenes/{scene_id}/image")
    def scene_image(scene_id: str, x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        try:
            task = service.get(scene_id)
        except ValidationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if not Path(task.image_ref).exists():
            raise HTTPException(status_code=404, detail="image missing")
        return FileResponse(task.image_ref)

    @app.get("/scenes/{scene_id}/preview")
    def preview(scene_id: str, x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        try:
            task = service.get(scene_id)
        except ValidationError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if task.preview_ref is None:
            raise HTTPException(status_code=404, detail="no preview yet")
        if Path(task.preview_ref).exists():
            return FileResponse(task.preview_ref)
        return {"preview_ref": task.preview_ref}

    @app.post("/scenes/{scene_id}/placements")
    def placements(scene_id: str, body: PlacementBody,
                   x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        try:
            return service.submit_placement(scene_id, body.placements).to_dict()
        except StateError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (GeometryMismatchError, UnknownClassError, ValidationError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/scenes/{scene_id}/review")
    def review(scene_id: str, body: ReviewBody,
               x_auth_token: str | None = Header(None)):
        check_auth(x_auth_token)
        try:
            return service.review(scene_id, body.verdict).to_dict()
        except StateError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")

    return app
