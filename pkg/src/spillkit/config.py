"""Shared configuration: class registry, generation profile, endpoints."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigBandError, UnknownClassError

# Bands from the generation hyperparameter sheet.
LORA_STRENGTH_BAND = (0.2, 0.4)
DENOISE_BAND = (0.5, 0.6)

DEFAULT_CLASSES = [
    "oil-spill",
    "floor-stain",
    "chemical-discoloration",
    "anomaly-4",
    "anomaly-5",
    "anomaly-6",
    "anomaly-7",
    "anomaly-8",
]


@dataclass
class ClassRegistry:
    """Eight anomaly classes: three named plus configurable slots."""

    names: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigBandError("duplicate class names", "classes")

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name) + 1  # COCO category ids are 1-based
        except ValueError:
            raise UnknownClassError(f"unregistered class: {name!r}") from None

    def name_of(self, class_id: int) -> str:
        if not (1 <= class_id <= len(self.names)):
            raise UnknownClassError(f"unregistered class id: {class_id}")
        return self.names[class_id - 1]

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def categories(self) -> list[dict]:
        return [{"id": i + 1, "name": n} for i, n in enumerate(self.names)]


@dataclass
class GenerationProfile:
    """Scene-generation and inpainting hyperparameters."""

    width: int = 1024
    height: int = 1024
    steps: int = 64
    cfg_scale: float = 8.0
    sampler_id: str = "DDPM-SDE-2m-GPU"   # opaque backend identifier
    scheduler_id: str = "Karras"
    lora_strength: float | None = None    # None: sample within the band
    ip_adapter_strength: float = 0.6
    denoise_strength: float | None = None
    differential_diffusion: bool = True
    mask_feather_px: float = 50.0
    mask_opacity: float = 0.75

    def validate(self, path: str = "generation") -> None:
        if self.width <= 0 or self.width % 8 or self.height <= 0 or self.height % 8:
            raise ConfigBandError(
                f"dimensions must be positive multiples of 8, got "
                f"{self.width}x{self.height}", f"{path}.width")
        if self.lora_strength is not None and not (
                LORA_STRENGTH_BAND[0] <= self.lora_strength <= LORA_STRENGTH_BAND[1]):
            raise ConfigBandError(
                f"lora_strength {self.lora_strength} outside "
                f"{LORA_STRENGTH_BAND}", f"{path}.lora_strength")
        if self.denoise_strength is not None and not (
                DENOISE_BAND[0] <= self.denoise_strength <= DENOISE_BAND[1]):
            raise ConfigBandError(
                f"denoise_strength {self.denoise_strength} outside "
                f"{DENOISE_BAND}", f"{path}.denoise_strength")
        if not (0.0 <= self.ip_adapter_strength <= 1.0):
            raise ConfigBandError(
                f"ip_adapter_strength {self.ip_adapter_strength} outside [0, 1]",
                f"{path}.ip_adapter_strength")
        if not (0.0 < self.mask_opacity <= 1.0):
            raise ConfigBandError(
                f"mask_opacity {self.mask_opacity} outside (0, 1]",
                f"{path}.mask_opacity")


@dataclass
class Config:
    """Top-level toolkit configuration, loadable from one JSON file."""

    diffusion_endpoint: str = "http://localhost:7860"
    vlm_endpoint: str = "http://localhost:8000/v1/chat/completions"
    registry: ClassRegistry = field(default_factory=ClassRegistry)
    generation: GenerationProfile = field(default_factory=GenerationProfile)
    alert_thresholds: dict[str, float] = field(default_factory=dict)
    default_alert_threshold: float = 0.5
    artifacts_dir: str = "artifacts"
    parallelism: int = 4
    seed: int = 0
    coord_ceiling: float = 1000.0
    retry_attempts: int = 3

    def validate(self) -> None:
        self.generation.validate()
        if self.parallelism < 1:
            raise ConfigBandError(
                f"parallelism must be >= 1, got {self.parallelism}",
                "parallelism")
        for name, thr in self.alert_thresholds.items():
            if not (0.0 <= thr <= 1.0):
                raise ConfigBandError(
                    f"threshold {thr} outside [0, 1]",
                    f"alert_thresholds.{name}")

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        cfg = cls()
        gen = data.get("generation", {})
        cfg.generation = GenerationProfile(**gen)
        if "classes" in data:
            cfg.registry = ClassRegistry(names=list(data["classes"]))
        for key in ("diffusion_endpoint", "vlm_endpoint", "artifacts_dir",
                    "parallelism", "seed", "coord_ceiling", "retry_attempts",
                    "default_alert_threshold"):
            if key in data:
                setattr(cfg, key, data[key])
        cfg.alert_thresholds = dict(data.get("alert_thresholds", {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))


def api_key(env_var: str = "SPILLKIT_API_KEY") -> str | None:
    """Backend credentials come from the environment only."""
    return os.environ.get(env_var)
