"""Scene-generation and inpainting job orchestration over an HTTP backend."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import requests

from . import prompts
from .config import (
    DENOISE_BAND,
    LORA_STRENGTH_BAND,
    ClassRegistry,
    GenerationProfile,
)
from .errors import (
    ContentFilterError,
    GeometryMismatchError,
    ParameterBandError,
    SpillkitError,
    TransportError,
    UnknownClassError,
)

_STATUS_ORDER = {"queued": 0, "running": 1, "done": 2, "failed": 2}


@dataclass(frozen=True)
class SceneJob:
    """One background-generation request."""

    positive_prompt: str
    negative_prompt: str
    width: int
    height: int
    steps: int
    cfg_scale: float
    sampler_id: str
    scheduler_id: str
    lora_strength: float
    ip_adapter_strength: float
    style_ref: str
    seed: int

    def __post_init__(self):
        if not (LORA_STRENGTH_BAND[0] <= self.lora_strength <= LORA_STRENGTH_BAND[1]):
            raise ParameterBandError(
                f"lora_strength {self.lora_strength} outside {LORA_STRENGTH_BAND}",
                field="lora_strength")
        if self.width <= 0 or self.width % 8 or self.height <= 0 or self.height % 8:
            raise ParameterBandError(
                f"dimensions must be positive multiples of 8: "
                f"{self.width}x{self.height}", field="width")

    def to_payload(self) -> dict:
        return {
            "positive_prompt": self.positive_prompt,
            "negative_prompt": self.negative_prompt,
            "width": self.width,
            "height": self.height,
            "steps": self.steps,
            "cfg_scale": self.cfg_scale,
            "sampler_id": self.sampler_id,
            "scheduler_id": self.scheduler_id,
            "lora_strength": self.lora_strength,
            "ip_adapter_strength": self.ip_adapter_strength,
            "style_ref": self.style_ref,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class InpaintJob:
    """One masked-region inpainting request."""

    scene_ref: str
    scene_width: int
    scene_height: int
    mask_ref: str
    mask_width: int
    mask_height: int
    class_name: str
    positive_prompt: str
    negative_prompt: str
    denoise_strength: float
    differential_diffusion: bool
    ip_adapter_spill_ref: str | None
    seed: int

    def __post_init__(self):
        if (self.mask_width, self.mask_height) != (self.scene_width, self.scene_height):
            raise GeometryMismatchError(
                f"mask {self.mask_width}x{self.mask_height} does not match "
                f"scene {self.scene_width}x{self.scene_height}")
        if not (DENOISE_BAND[0] <= self.denoise_strength <= DENOISE_BAND[1]):
            raise ParameterBandError(
                f"denoise_strength {self.denoise_strength} outside {DENOISE_BAND}",
                field="denoise_strength")

    def to_payload(self) -> dict:
        return {
            "scene_ref": self.scene_ref,
            "mask_ref": self.mask_ref,
            "class_name": self.class_name,
            "positive_prompt": self.positive_prompt,
            "negative_prompt": self.negative_prompt,
            "denoise_strength": self.denoise_strength,
            "differential_diffusion": self.differential_diffusion,
            "ip_adapter_spill_ref": self.ip_adapter_spill_ref,
            "seed": self.seed,
        }


@dataclass
class JobRecord:
    """Lifecycle record for one submitted job."""

    job_id: str
    kind: str  # "scene" | "inpaint"
    status: str = "queued"
    attempts: int = 0
    artifact_path: str | None = None
    sidecar_path: str | None = None
    created_at: float = 0.0
    completed_at: float | None = None
    error: str | None = None

    def advance(self, status: str) -> None:
        if _STATUS_ORDER[status] < _STATUS_ORDER[self.status]:
            raise SpillkitError(
                f"illegal transition {self.status} -> {status}")
        self.status = status


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    factor: float = 2.0

    def delay(self, attempt: int) -> float:
        return self.base_delay * self.factor ** attempt


def job_id_for(kind: str, payload: dict) -> str:
    digest = hashlib.sha256(
        (kind + canonical_json(payload)).encode()
    ).hexdigest()
    return f"{kind}-{digest[:16]}"


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def build_scene_job(profile: GenerationProfile, style_ref: str,
                    seed: int) -> SceneJob:
    """Assemble a scene job from the prompt bank; deterministic in its inputs."""
    profile.validate()
    if profile.lora_strength is not None:
        lora = profile.lora_strength
    else:
        lora = random.Random(f"scene-lora:{seed}").uniform(*LORA_STRENGTH_BAND)
    return SceneJob(
        positive_prompt=prompts.SCENE_POSITIVE,
        negative_prompt=prompts.SCENE_NEGATIVE,
        width=profile.width,
        height=profile.height,
        steps=profile.steps,
        cfg_scale=profile.cfg_scale,
        sampler_id=profile.sampler_id,
        scheduler_id=profile.scheduler_id,
        lora_strength=lora,
        ip_adapter_strength=profile.ip_adapter_strength,
        style_ref=style_ref,
        seed=seed,
    )


def build_inpaint_job(
    scene_ref: str,
    scene_size: tuple[int, int],
    mask_ref: str,
    mask_size: tuple[int, int],
    class_name: str,
    registry: ClassRegistry,
    profile: GenerationProfile,
    seed: int,
    spill_ref: str | None = None,
) -> InpaintJob:
    """Class-specific inpainting job; denoise drawn from its band by seed."""
    if class_name not in registry:
        raise UnknownClassError(f"unregistered class: {class_name!r}")
    if profile.denoise_strength is not None:
        denoise = profile.denoise_strength
    else:
        denoise = random.Random(f"inpaint-denoise:{seed}").uniform(*DENOISE_BAND)
    return InpaintJob(
        scene_ref=scene_ref,
        scene_width=scene_size[0],
        scene_height=scene_size[1],
        mask_ref=mask_ref,
        mask_width=mask_size[0],
        mask_height=mask_size[1],
        class_name=class_name,
        positive_prompt=prompts.inpaint_positive(class_name),
        negative_prompt=prompts.INPAINT_NEGATIVE,
        denoise_strength=denoise,
        differential_diffusion=profile.differential_diffusion,
        ip_adapter_spill_ref=spill_ref,
        seed=seed,
    )


class DiffusionBackend(Protocol):
    """Minimal REST abstraction: txt2img and inpaint, plus job polling.

    submit() returns either a terminal response ({"status": "done",
    "image_b64": ...} / {"status": "failed", ...}) or {"job_id": ...} to
    be polled via poll().
    """

    def submit(self, kind: str, payload: dict) -> dict: ...

    def poll(self, job_id: str) -> dict: ...


class HttpDiffusionBackend:
    """JSON-over-HTTP adapter: POST /txt2img, POST /inpaint, GET /jobs/{id}."""

    def __init__(self, base_url: str, api_key: str | None = None,
                 timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()
        if api_key:
            self.session.headers["Authorization"] = f"Bearer {api_key}"

    def submit(self, kind: str, payload: dict) -> dict:
        route = {"scene": "/txt2img", "inpaint": "/inpaint"}[kind]
        return self._request("POST", route, json=payload)

    def poll(self, job_id: str) -> dict:
        return self._request("GET", f"/jobs/{job_id}")

    def _request(self, method: str, route: str, **kwargs) -> dict:
        try:
            resp = self.session.request(
                method, self.base_url + route, timeout=self.timeout, **kwargs)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 422:
            raise ContentFilterError(resp.text)
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def submit_and_poll(
    job: SceneJob | InpaintJob,
    backend: DiffusionBackend,
    out_dir: str | Path,
    retry: RetryPolicy = RetryPolicy(),
    poll_interval: float = 0.05,
    sleep: Callable[[float], None] = time.sleep,
) -> JobRecord:
    """Run one job to a terminal state, persisting artifact + sidecar.

    Transport failures are retried with exponential backoff up to the
    attempt limit; content-filter rejections fail immediately. The sidecar
    is a deterministic parameter echo so reruns are byte-identical;
    timestamps live on the returned record.
    """
    kind = "scene" if isinstance(job, SceneJob) else "inpaint"
    payload = job.to_payload()
    record = JobRecord(job_id=job_id_for(kind, payload), kind=kind,
                       created_at=time.time())
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    while record.attempts < retry.max_attempts:
        record.attempts += 1
        record.advance("running")
        try:
            resp = backend.submit(kind, payload)
            while "status" not in resp or resp["status"] in ("queued", "running"):
                sleep(poll_interval)
                resp = backend.poll(resp["job_id"])
            if resp["status"] == "failed":
                if resp.get("reason") == "content_filter":
                    raise ContentFilterError(resp.get("detail", "rejected"))
                raise TransportError(resp.get("detail", "backend failure"))
        except ContentFilterError as exc:
            record.error = f"content filter: {exc}"
            record.advance("failed")
            record.completed_at = time.time()
            return record
        except TransportError as exc:
            record.error = str(exc)
            if record.attempts >= retry.max_attempts:
                record.advance("failed")
                record.completed_at = time.time()
                return record
            sleep(retry.delay(record.attempts - 1))
            continue

        image = base64.b64decode(resp["image_b64"])
        artifact = out_dir / f"{record.job_id}.png"
        sidecar = out_dir / f"{record.job_id}.json"
        _atomic_write(artifact, image)
        _atomic_write(sidecar, (canonical_json({
            "job_id": record.job_id,
            "kind": kind,
            "parameters": payload,
            "artifact": artifact.name,
        }) + "\n").encode())
        record.artifact_path = str(artifact)
        record.sidecar_path = str(sidecar)
        record.advance("done")
        record.completed_at = time.time()
        return record

    record.advance("failed")
    return record


def run_batch(
    jobs: Sequence[SceneJob | InpaintJob],
    backend: DiffusionBackend,
    out_dir: str | Path,
    parallelism: int = 4,
    retry: RetryPolicy = RetryPolicy(),
    poll_interval: float = 0.05,
    sleep: Callable[[float], None] = time.sleep,
) -> list[JobRecord]:
    """Run jobs with at most `parallelism` in flight; order preserved."""
    if parallelism < 1:
        raise ParameterBandError("parallelism must be >= 1", field="parallelism")
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = [
            pool.submit(submit_and_poll, job, backend, out_dir, retry,
                        poll_interval, sleep)
            for job in jobs
        ]
        return [f.result() for f in futures]


def load_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
