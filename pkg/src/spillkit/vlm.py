"""Structured VLM prompting, chat-backend calls, and robust output parsing."""

from __future__ import annotations

import base64
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import requests

from . import prompts
from .errors import (
    ContextOverflowError,
    InvalidInputError,
    TransportError,
    UnsupportedShotCountError,
)
from .geometry import BBox, Detection

SUPPORTED_SHOT_COUNTS = (5, 10, 15)
NO_HAZARD_SENTINELS = ("no hazard", "no spill", "none detected", "not present")


@dataclass(frozen=True)
class PromptTemplate:
    """Inspector persona plus the per-class detection request."""

    system_text: str = prompts.INSPECTOR_SYSTEM
    user_text_pattern: str = prompts.DETECT_USER_PATTERN

    def __post_init__(self):
        if not self.system_text.strip():
            raise InvalidInputError("system text must be non-empty")
        if self.user_text_pattern.count("{class_name}") != 1:
            raise InvalidInputError(
                "user pattern must contain exactly one {class_name} placeholder")

    def user_text(self, class_name: str) -> str:
        return self.user_text_pattern.format(class_name=class_name)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.10
    top_p: float = 0.001
    repetition_penalty: float = 1.2
    max_tokens: int = 512

    def __post_init__(self):
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if not (0.0 < self.top_p <= 1.0):
            raise InvalidInputError("top_p must be in (0, 1]")

    def to_request_fields(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "repetition_penalty": self.repetition_penalty,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class IclSupportSet:
    """k solved examples conditioning the query; weights stay frozen."""

    examples: tuple  # of (image_ref, tuple of ground-truth detection dicts)

    @property
    def k(self) -> int:
        return len(self.examples)

    def __post_init__(self):
        for ref, gts in self.examples:
            if not gts:
                raise InvalidInputError(
                    f"support example {ref!r} has no ground truths")


@dataclass
class ParsedDetections:
    """Parse outcome; raw text always retained for audit."""

    detections: list[Detection]
    parse_status: str  # clean | repaired | empty | unparseable
    raw_text: str
    dropped: int = 0  # malformed records discarded during normalization


def _image_content(image_ref: str) -> dict:
    """Image message part: pass URLs through, inline local files as base64."""
    if re.match(r"^(https?|data):", image_ref):
        url = image_ref
    else:
        data = Path(image_ref).read_bytes()
        url = "data:image/png;base64," + base64.b64encode(data).decode()
    return {"type": "image_url", "image_url": {"url": url}}


def _gt_answer_json(gts: Sequence[dict]) -> str:
    """Assistant-turn answer: list of COCO-style records."""
    return json.dumps(list(gts))


def build_messages(
    image_ref: str,
    class_name: str,
    support: IclSupportSet | None = None,
    template: PromptTemplate = PromptTemplate(),
    allow_any_k: bool = False,
) -> list[dict]:
    """Chat message list: system persona, k solved example pairs, query.

    Message count is exactly 2 + 2k.
    """
    if support is not None and not allow_any_k \
            and support.k not in SUPPORTED_SHOT_COUNTS:
        raise UnsupportedShotCountError(
            f"k={support.k} not in {SUPPORTED_SHOT_COUNTS}")
    user_text = template.user_text(class_name)
    messages: list[dict] = [{"role": "system", "content": template.system_text}]
    if support is not None:
        for ref, gts in support.examples:
            messages.append({
                "role": "user",
                "content": [_image_content(ref), {"type": "text", "text": user_text}],
            })
            messages.append({"role": "assistant", "content": _gt_answer_json(gts)})
    messages.append({
        "role": "user",
        "content": [_image_content(image_ref), {"type": "text", "text": user_text}],
    })
    return messages


class ChatBackend(Protocol):
    """Chat-completions backend: messages in, assistant text out."""

    def complete(self, messages: list[dict], params: DecodingParams) -> str: ...


class HttpChatBackend:
    """OpenAI-style chat completions over HTTP JSON."""

    def __init__(self, endpoint: str, model: str = "default",
                 api_key: str | None = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.session = requests.Session()
        if api_key:
            self.session.headers["Authorization"] = f"Bearer {api_key}"

    def complete(self, messages: list[dict], params: DecodingParams) -> str:
        body = {"model": self.model, "messages": messages}
        body.update(params.to_request_fields())
        try:
            resp = self.session.post(self.endpoint, json=body,
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 413:
            raise ContextOverflowError(resp.text[:200])
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {data}") from exc


class ReplayLog:
    """Append-only JSON-lines log of request/response pairs."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        line = json.dumps(entry, sort_keys=True)
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(line + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(ln) for ln in self.path.read_text().splitlines()
                if ln.strip()]

    def lookup(self) -> dict[tuple, str]:
        """(image_ref, class_name) -> latest response text."""
        out: dict[tuple, str] = {}
        for e in self.entries():
            if e.get("response_text") is not None:
                out[(e["image_ref"], e["class_name"])] = e["response_text"]
        return out


def normalize_coords(
    raw_bbox: Sequence[float],
    image_w: float,
    image_h: float,
    ceiling: float = 1000.0,
) -> BBox | None:
    """Interpret a raw [x, y, w, h] as pixels or a [0, ceiling] frame.

    Values are rescaled from the normalized frame only when they all fit
    under the ceiling and the image is larger than it; the result is
    clamped to image bounds. Returns None for malformed extents.
    """
    try:
        x, y, w, h = (float(v) for v in raw_bbox)
    except (TypeError, ValueError):
        return None
    if w < 0 or h < 0 or any(v != v for v in (x, y, w, h)):
        return None
    if max(image_w, image_h) > ceiling and all(
            0 <= v <= ceiling for v in (x, y, x + w, y + h)):
        x *= image_w / ceiling
        w *= image_w / ceiling
        y *= image_h / ceiling
        h *= image_h / ceiling
    x_min = min(max(x, 0.0), image_w)
    y_min = min(max(y, 0.0), image_h)
    x_max = min(max(x + w, x_min), image_w)
    y_max = min(max(y + h, y_min), image_h)
    if x_max < x_min or y_max < y_min:
        return None
    return BBox(x_min, y_min, x_max, y_max)


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL)


def _first_balanced(text: str) -> str | None:
    """First balanced {...} or [...] span, ignoring quoted brackets."""
    for opener, closer in (("{", "}"), ("[", "]")):
        start = text.find(opener)
        while start != -1:
            depth, in_str, escape = 0, False, False
            for i in range(start, len(text)):
                ch = text[i]
                if in_str:
                    if escape:
                        escape = False
                    elif ch == "\\":
                        escape = True
                    elif ch == '"':
                        in_str = False
                    continue
                if ch == '"':
                    in_str = True
                elif ch == opener:
                    depth += 1
                elif ch == closer:
                    depth -= 1
                    if depth == 0:
                        return text[start:i + 1]
            start = text.find(opener, start + 1)
    return None


def _records_from_json(obj) -> list[dict] | None:
    """Coerce a parsed JSON value into a list of bbox records."""
    if isinstance(obj, dict):
        if "bbox" in obj:
            return [obj]
        for key in ("detections", "annotations", "objects"):
            if isinstance(obj.get(key), list):
                obj = obj[key]
                break
        else:
            return None
    if isinstance(obj, list):
        if not obj:
            return []
        records = [r for r in obj if isinstance(r, dict) and "bbox" in r]
        return records if records else None
    return None


def parse_response(
    text: str,
    image_w: float,
    image_h: float,
    ceiling: float = 1000.0,
    default_class=None,
) -> ParsedDetections:
    """Total parser: strict JSON, then code fence, then balanced brackets.

    Never raises; unparseable text yields an empty result flagged
    unparseable. Missing scores default to 1.0.
    """
    if not isinstance(text, str):
        text = str(text)

    attempts: list[tuple[str, str]] = [("clean", text)]
    fence = _FENCE_RE.search(text)
    if fence:
        attempts.append(("repaired", fence.group(1)))
    balanced = _first_balanced(text)
    if balanced is not None:
        attempts.append(("repaired", balanced))

    for status, candidate in attempts:
        try:
            obj = json.loads(candidate)
        except (json.JSONDecodeError, RecursionError, ValueError):
            continue
        records = _records_from_json(obj)
        if records is None:
            continue
        detections: list[Detection] = []
        dropped = 0
        for rec in records:
            bbox = normalize_coords(rec.get("bbox", ()), image_w, image_h,
                                    ceiling)
            if bbox is None:
                dropped += 1
                continue
            score = rec.get("score", 1.0)
            if not isinstance(score, (int, float)) or not (0 <= score <= 1):
                dropped += 1
                continue
            detections.append(Detection(
                bbox=bbox,
                class_id=rec.get("category_id", default_class),
                score=float(score),
            ))
        if not detections and dropped == 0:
            return ParsedDetections([], "empty", text)
        return ParsedDetections(detections, status, text, dropped=dropped)

    lowered = text.lower()
    if any(s in lowered for s in NO_HAZARD_SENTINELS):
        return ParsedDetections([], "empty", text)
    return ParsedDetections([], "unparseable", text)


def serialize_detections(detections: Sequence[Detection]) -> str:
    """Detections as the COCO-style record list the parser round-trips."""
    return json.dumps([
        {
            "category_id": d.class_id,
            "bbox": [d.bbox.x_min, d.bbox.y_min, d.bbox.width, d.bbox.height],
            "score": d.score,
        }
        for d in detections
    ])


def detect(
    image_ref: str,
    class_name: str,
    backend: ChatBackend,
    params: DecodingParams = DecodingParams(),
    support: IclSupportSet | None = None,
    image_size: tuple[float, float] = (1024.0, 1024.0),
    ceiling: float = 1000.0,
    replay_log: ReplayLog | None = None,
    class_id=None,
    template: PromptTemplate = PromptTemplate(),
) -> ParsedDetections:
    """One detection query with the standard decoding parameters."""
    messages = build_messages(image_ref, class_name, support, template)
    entry = {
        "image_ref": image_ref,
        "class_name": class_name,
        "params": params.to_request_fields(),
        "k": support.k if support else 0,
        "timestamp": time.time(),
    }
    try:
        text = backend.complete(messages, params)
    except (TransportError, ContextOverflowError):
        if replay_log is not None:
            entry["response_text"] = None
            entry["error"] = "transport"
            replay_log.append(entry)
        raise
    if replay_log is not None:
        entry["response_text"] = text
        replay_log.append(entry)
    return parse_response(text, image_size[0], image_size[1], ceiling,
                          default_class=class_id if class_id is not None
                          else class_name)
