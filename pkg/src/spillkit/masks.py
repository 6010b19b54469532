"""Feathered soft masks for bounding-box inpainting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyMaskError, InvalidInputError
from .geometry import BBox

DEFAULT_FEATHER_PX = 50.0
DEFAULT_OPACITY = 0.75


@dataclass(frozen=True)
class MaskSpec:
    """Feathering parameters for one annotated box."""

    bbox: BBox
    feather_px: float = DEFAULT_FEATHER_PX
    opacity: float = DEFAULT_OPACITY
    ramp: str = "linear"  # or "gaussian"

    def __post_init__(self):
        if self.feather_px < 0:
            raise InvalidInputError("feather_px must be >= 0")
        if not (0.0 < self.opacity <= 1.0):
            raise InvalidInputError("opacity must be in (0, 1]")
        if self.ramp not in ("linear", "gaussian"):
            raise InvalidInputError(f"unknown ramp: {self.ramp}")

    def to_dict(self) -> dict:
        return {
            "bbox": [self.bbox.x_min, self.bbox.y_min,
                     self.bbox.x_max, self.bbox.y_max],
            "feather_px": self.feather_px,
            "opacity": self.opacity,
            "ramp": self.ramp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(bbox=BBox(*d["bbox"]), feather_px=d["feather_px"],
                   opacity=d["opacity"], ramp=d.get("ramp", "linear"))


@dataclass
class MaskImage:
    """Single-channel 8-bit mask matching the target scene dimensions."""

    width: int
    height: int
    values: np.ndarray  # uint8, shape (height, width)

    @property
    def peak(self) -> int:
        return int(self.values.max(initial=0))

    def to_png(self, path: str | Path) -> None:
        Image.fromarray(self.values, mode="L").save(path)

    @classmethod
    def from_png(cls, path: str | Path) -> "MaskImage":
        arr = np.asarray(Image.open(path).convert("L"))
        return cls(width=arr.shape[1], height=arr.shape[0], values=arr)


def render_feathered_mask(spec: MaskSpec, width: int, height: int) -> MaskImage:
    """Full opacity inside the box, ramping to zero over the feather band.

    Pixel value at integer grid position p is
    round(opacity * 255 * (1 - clamp(d(p) / feather_px, 0, 1))) with d the
    Chebyshev distance from p to the box (0 inside). feather_px = 0 gives a
    hard rectangle.
    """
    b = spec.bbox
    if b.x_max < 0 or b.y_max < 0 or b.x_min > width - 1 or b.y_min > height - 1:
        raise EmptyMaskError(
            f"bbox {b} lies entirely outside a {width}x{height} image"
        )
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    dx = np.maximum(np.maximum(b.x_min - xs, xs - b.x_max), 0.0)
    dy = np.maximum(np.maximum(b.y_min - ys, ys - b.y_max), 0.0)
    d = np.maximum(dy[:, None], dx[None, :])  # Chebyshev distance to the box

    peak = spec.opacity * 255.0
    if spec.ramp == "gaussian":
        sigma = spec.feather_px / 3.0 if spec.feather_px > 0 else 0.0
        if sigma == 0.0:
            falloff = (d == 0).astype(np.float64)
        else:
            falloff = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
            falloff[d > spec.feather_px] = 0.0
    elif spec.feather_px == 0:
        falloff = (d == 0).astype(np.float64)
    else:
        falloff = 1.0 - np.clip(d / spec.feather_px, 0.0, 1.0)

    values = np.rint(peak * falloff).astype(np.uint8)
    return MaskImage(width=width, height=height, values=values)


def write_mask_with_sidecar(spec: MaskSpec, width: int, height: int,
                            path: str | Path) -> MaskImage:
    """Render, save as PNG, and record the spec in a .json sidecar."""
    mask = render_feathered_mask(spec, width, height)
    path = Path(path)
    mask.to_png(path)
    sidecar = {"width": width, "height": height, "spec": spec.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return mask
