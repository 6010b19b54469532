"""Annotation corpora: COCO-style JSON, YOLO text records, dedup, splits."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CocoParseError,
    CocoValidationError,
    DegenerateBoxError,
    InvalidInputError,
    RangeError,
    SplitCountError,
)


@dataclass
class CocoDataset:
    """COCO-style dataset; records keep unknown fields for round-tripping.

    `warnings` collects non-fatal issues found during validation (e.g.
    boxes overflowing the image by a pixel, which get clamped).
    """

    images: list[dict]
    annotations: list[dict]
    categories: list[dict]
    extra: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def image_by_id(self, image_id) -> dict:
        return self._image_index()[image_id]

    def _image_index(self) -> dict:
        return {img["id"]: img for img in self.images}

    def annotations_for(self, image_id) -> list[dict]:
        return [a for a in self.annotations if a["image_id"] == image_id]

    def to_dict(self) -> dict:
        out = dict(self.extra)
        out["images"] = self.images
        out["annotations"] = self.annotations
        out["categories"] = self.categories
        return out


@dataclass(frozen=True)
class YoloRecord:
    """One YOLO label line: 0-based class index and normalized box."""

    class_idx: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise RangeError(f"{name}={v} outside [0, 1]")
        if self.w == 0 or self.h == 0:
            raise DegenerateBoxError("zero-extent YOLO record")

    def to_line(self) -> str:
        return f"{self.class_idx} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"

    @classmethod
    def from_line(cls, line: str) -> "YoloRecord":
        parts = line.split()
        if len(parts) != 5:
            raise InvalidInputError(f"expected 5 fields, got {len(parts)}: {line!r}")
        return cls(int(parts[0]), *(float(p) for p in parts[1:]))


@dataclass
class SplitManifest:
    """Named, pairwise-disjoint image-id splits plus a source tag."""

    splits: dict[str, list]
    source: str = "synthetic"

    def to_json(self) -> str:
        return json.dumps({"source": self.source, "splits": self.splits}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        data = json.loads(text)
        return cls(splits=data["splits"], source=data.get("source", "synthetic"))


def parse_coco(data: bytes | str, clamp: bool = True) -> CocoDataset:
    """Parse and validate a COCO-style JSON document.

    Dangling image/category references are fatal; boxes that overflow their
    image bounds are clamped with a warning when `clamp` is set.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise CocoParseError(f"malformed JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(raw, dict):
        raise CocoParseError("top-level COCO document must be a JSON object")

    images = raw.get("images", [])
    annotations = raw.get("annotations", [])
    categories = raw.get("categories", [])
    extra = {k: v for k, v in raw.items()
             if k not in ("images", "annotations", "categories")}

    image_ids = {img["id"] for img in images}
    category_ids = {cat["id"] for cat in categories}
    dangling_images = sorted(
        {a["image_id"] for a in annotations if a["image_id"] not in image_ids}
    )
    if dangling_images:
        raise CocoValidationError(
            f"annotations reference missing images: {dangling_images}",
            ids=dangling_images,
        )
    dangling_cats = sorted(
        {a["category_id"] for a in annotations
         if category_ids and a["category_id"] not in category_ids}
    )
    if dangling_cats:
        raise CocoValidationError(
            f"annotations reference missing categories: {dangling_cats}",
            ids=dangling_cats,
        )

    ds = CocoDataset(images=images, annotations=annotations,
                     categories=categories, extra=extra)
    index = ds._image_index()
    for ann in annotations:
        x, y, w, h = ann["bbox"]
        if w <= 0 or h <= 0:
            raise CocoValidationError(
                f"annotation {ann.get('id')} has non-positive extent {ann['bbox']}",
                ids=[ann.get("id")],
            )
        img = index[ann["image_id"]]
        iw, ih = img.get("width"), img.get("height")
        if iw is None or ih is None:
            continue
        if x < 0 or y < 0 or x + w > iw or y + h > ih:
            ds.warnings.append(
                f"annotation {ann.get('id')} bbox {ann['bbox']} exceeds "
                f"image {ann['image_id']} bounds {iw}x{ih}"
            )
            if clamp:
                nx, ny = max(x, 0), max(y, 0)
                ann["bbox"] = [nx, ny,
                               min(x + w, iw) - nx, min(y + h, ih) - ny]
    return ds


def serialize_coco(ds: CocoDataset) -> str:
    return json.dumps(ds.to_dict(), indent=2, sort_keys=False)


def coco_to_yolo(bbox: Sequence[float], image_w: float, image_h: float,
                 class_idx: int = 0) -> YoloRecord:
    """Absolute [x, y, w, h] to normalized center-format record."""
    if image_w <= 0 or image_h <= 0:
        raise InvalidInputError("image dimensions must be positive")
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"zero-area bbox {bbox}")
    return YoloRecord(
        class_idx=class_idx,
        cx=(x + w / 2) / image_w,
        cy=(y + h / 2) / image_h,
        w=w / image_w,
        h=h / image_h,
    )


def yolo_to_coco(rec: YoloRecord, image_w: float, image_h: float) -> list[float]:
    """Normalized center-format record back to absolute [x, y, w, h]."""
    if image_w <= 0 or image_h <= 0:
        raise InvalidInputError("image dimensions must be positive")
    w = rec.w * image_w
    h = rec.h * image_h
    return [rec.cx * image_w - w / 2, rec.cy * image_h - h / 2, w, h]


def write_yolo_file(records: Iterable[YoloRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in records))


def read_yolo_file(path: str | Path) -> list[YoloRecord]:
    lines = Path(path).read_text().splitlines()
    return [YoloRecord.from_line(ln) for ln in lines if ln.strip()]


def dhash(image: Image.Image | str | Path, hash_size: int = 8) -> int:
    """64-bit difference hash of a grayscale downscale (9x8 by default)."""
    if not isinstance(image, Image.Image):
        image = Image.open(image)
    small = image.convert("L").resize(
        (hash_size + 1, hash_size), Image.Resampling.LANCZOS
    )
    px = np.asarray(small, dtype=np.int16)
    bits = (px[:, 1:] > px[:, :-1]).flatten()
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


@dataclass
class DedupResult:
    clusters: list[list]          # each cluster: canonical id first
    skipped: list[tuple[str, str]]  # (id, reason)

    @property
    def canonical(self) -> list:
        return [c[0] for c in self.clusters]


def dedup(images: dict | Sequence[tuple], max_hamming: int = 8) -> DedupResult:
    """Cluster near-duplicate images by dHash distance.

    `images` maps id -> image source (path or PIL image). Clustering is
    order-independent: ids are processed sorted and single-linkage unions
    are commutative.
    """
    if isinstance(images, dict):
        items = list(images.items())
    else:
        items = list(images)
    items.sort(key=lambda kv: str(kv[0]))

    hashes: dict = {}
    skipped: list[tuple[str, str]] = []
    for key, src in items:
        try:
            hashes[key] = dhash(src)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            skipped.append((key, str(exc)))

    keys = list(hashes)
    parent = {k: k for k in keys}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            if hamming(hashes[a], hashes[b]) <= max_hamming:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb, key=str)] = min(ra, rb, key=str)

    groups: dict = {}
    for k in keys:
        groups.setdefault(find(k), []).append(k)
    clusters = [sorted(g, key=str) for g in groups.values()]
    clusters.sort(key=lambda c: str(c[0]))
    return DedupResult(clusters=clusters, skipped=skipped)


def make_splits(dataset: CocoDataset, counts: dict[str, int],
                seed: int, source: str = "synthetic") -> SplitManifest:
    """Deterministic disjoint splits of the dataset's image ids."""
    ids = sorted((img["id"] for img in dataset.images), key=str)
    total = sum(counts.values())
    if total > len(ids):
        raise SplitCountError(
            f"requested {total} images across splits, dataset has {len(ids)}"
        )
    rng = random.Random(seed)
    rng.shuffle(ids)
    splits: dict[str, list] = {}
    cursor = 0
    for name, n in counts.items():
        if n < 0:
            raise SplitCountError(f"negative count for split {name!r}")
        splits[name] = sorted(ids[cursor:cursor + n], key=str)
        cursor += n
    return SplitManifest(splits=splits, source=source)
