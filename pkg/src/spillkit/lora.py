"""Low-rank adapter merging over a simple binary tensor container.

Container layout: 8-byte little-endian unsigned header length N, then N
bytes of JSON header mapping tensor name -> {"dtype": "f32", "shape":
[...], "offset": int}, then the raw little-endian float32 payload.
Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptionError,
    DimensionError,
    TruncationError,
    UnknownTargetError,
)

_DTYPE_SIZES = {"f32": 4}

# Tensor-name prefixes deciding which adaptation variant touches a target.
VISION_PREFIXES = ("visual.", "vision.")
LANGUAGE_PREFIXES = ("language.", "lm.", "text.")


@dataclass
class TensorStore:
    """Parsed container: header metadata plus the contiguous payload.

    The original header bytes are kept so an unmodified store writes back
    bit-exactly.
    """

    header: dict[str, dict]
    payload: bytearray
    header_bytes: bytes = b""

    def names(self) -> list[str]:
        return list(self.header)

    def _entry(self, name: str) -> dict:
        if name not in self.header:
            raise UnknownTargetError(f"no tensor named {name!r}")
        return self.header[name]

    def get(self, name: str) -> np.ndarray:
        meta = self._entry(name)
        size = int(np.prod(meta["shape"], dtype=np.int64)) * _DTYPE_SIZES[meta["dtype"]]
        start = meta["offset"]
        buf = bytes(self.payload[start:start + size])
        return np.frombuffer(buf, dtype="<f4").reshape(meta["shape"]).copy()

    def set(self, name: str, values: np.ndarray) -> None:
        meta = self._entry(name)
        if list(values.shape) != list(meta["shape"]):
            raise DimensionError(
                f"tensor {name!r} has shape {meta['shape']}, got {list(values.shape)}")
        raw = np.ascontiguousarray(values, dtype="<f4").tobytes()
        start = meta["offset"]
        self.payload[start:start + len(raw)] = raw


@dataclass
class LoraAdapter:
    """Low-rank factors; the update added to a weight is alpha * A @ B."""

    A: np.ndarray  # d_out x r
    B: np.ndarray  # r x d_in
    alpha: float | None = None  # defaults to 1/r

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise DimensionError("adapter factors must be matrices")
        if self.A.shape[1] != self.B.shape[0]:
            raise DimensionError(
                f"inner dimensions disagree: A is {self.A.shape}, "
                f"B is {self.B.shape}")
        if self.A.shape[1] < 1:
            raise DimensionError("rank must be >= 1")
        if self.alpha is None:
            self.alpha = 1.0 / self.rank
        if self.alpha <= 0:
            raise DimensionError(f"alpha must be > 0, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def read_store(data: bytes) -> TensorStore:
    """Parse a container, validating offsets against the payload."""
    if len(data) < 8:
        raise TruncationError("container shorter than its length prefix")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise TruncationError(
            f"declared header length {header_len} exceeds file size {len(data)}")
    header_bytes = data[8:8 + header_len]
    try:
        header = json.loads(header_bytes)
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CorruptionError("header must be a JSON object")
    payload = bytearray(data[8 + header_len:])

    spans = []
    for name, meta in header.items():
        if meta.get("dtype") not in _DTYPE_SIZES:
            raise CorruptionError(f"tensor {name!r}: unsupported dtype {meta.get('dtype')}")
        size = int(np.prod(meta["shape"], dtype=np.int64)) * _DTYPE_SIZES[meta["dtype"]]
        start = meta["offset"]
        if start < 0 or start + size > len(payload):
            raise TruncationError(
                f"tensor {name!r} spans [{start}, {start + size}) past "
                f"payload end {len(payload)}")
        spans.append((start, start + size, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptionError(f"tensors {n0!r} and {n1!r} overlap")
    return TensorStore(header=header, payload=payload,
                       header_bytes=bytes(header_bytes))


def write_store(store: TensorStore) -> bytes:
    """Serialize; bit-exact inverse of read_store for unmodified stores."""
    header_bytes = store.header_bytes or json.dumps(store.header).encode()
    return struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(store.payload)


def build_store(tensors: dict[str, np.ndarray]) -> TensorStore:
    """Construct a fresh container from named float32 arrays."""
    header: dict[str, dict] = {}
    payload = bytearray()
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {"dtype": "f32", "shape": list(np.shape(arr)),
                        "offset": len(payload)}
        payload.extend(raw)
    header_bytes = json.dumps(header).encode()
    return TensorStore(header=header, payload=payload, header_bytes=header_bytes)


def merge(W: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W + alpha * A @ B, accumulated in float64, stored as float32."""
    W = np.asarray(W)
    d_out, r = adapter.A.shape
    d_in = adapter.B.shape[1]
    if W.shape != (d_out, d_in):
        raise DimensionError(
            f"weight shape {W.shape} does not match adapter "
            f"({d_out}x{r}) @ ({r}x{d_in})")
    merged = W.astype(np.float64) + adapter.alpha * (adapter.A @ adapter.B)
    return merged.astype(np.float32)


def variant_targets(names: list[str], variant: str) -> list[str]:
    """Filter tensor names by adaptation pathway."""
    if variant == "V":
        prefixes = VISION_PREFIXES
    elif variant == "L":
        prefixes = LANGUAGE_PREFIXES
    elif variant == "V+L":
        prefixes = VISION_PREFIXES + LANGUAGE_PREFIXES
    else:
        raise ValueError(f"unknown variant {variant!r}; use L, V, or V+L")
    return [n for n in names if n.startswith(prefixes)]


def merge_store(
    base: TensorStore,
    adapters: dict[str, LoraAdapter],
    variant: str = "V+L",
    vision_prefixes: tuple[str, ...] = VISION_PREFIXES,
    language_prefixes: tuple[str, ...] = LANGUAGE_PREFIXES,
) -> TensorStore:
    """Merge adapters into the targets selected by the pathway variant.

    Only filtered targets change; every other tensor stays bit-identical.
    """
    if variant == "V":
        prefixes = vision_prefixes
    elif variant == "L":
        prefixes = language_prefixes
    elif variant == "V+L":
        prefixes = vision_prefixes + language_prefixes
    else:
        raise ValueError(f"unknown variant {variant!r}; use L, V, or V+L")

    for target in adapters:
        if target not in base.header:
            raise UnknownTargetError(f"adapter targets missing tensor {target!r}")

    out = TensorStore(header=json.loads(json.dumps(base.header)),
                      payload=bytearray(base.payload),
                      header_bytes=base.header_bytes)
    for target, adapter in adapters.items():
        if not target.startswith(prefixes):
            continue
        out.set(target, merge(out.get(target), adapter))
    return out


def adapters_from_store(store: TensorStore,
                        alpha: float | None = None) -> dict[str, LoraAdapter]:
    """Read adapters from a container holding <target>.lora_A/.lora_B pairs."""
    adapters: dict[str, LoraAdapter] = {}
    for name in store.names():
        if not name.endswith(".lora_A"):
            continue
        target = name[: -len(".lora_A")]
        b_name = target + ".lora_B"
        if b_name not in store.header:
            raise UnknownTargetError(f"adapter {target!r} is missing {b_name!r}")
        adapters[target] = LoraAdapter(A=store.get(name), B=store.get(b_name),
                                       alpha=alpha)
    return adapters
