"""Raster types, patch geometry, probability-map algebra and the MDI file format."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-6


class FormatError(ValueError):
    """Malformed MDI payload. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ContractError(RuntimeError):
    """A trained model was applied to inputs it was not trained for."""


@dataclass(frozen=True, eq=False)
class MultiChannelImage:
    """C x H x W float32 intensities, one plane per modality."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError(f"image must be (channels, height, width), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def digest(self) -> str:
        return _digest(self.data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if not 1 <= self.n_classes <= 256:
            raise ValueError(f"class count must be in [1, 256], got {self.n_classes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def digest(self) -> str:
        return _digest(self.labels)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """L x H x W float32 per-pixel class distributions."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or values.shape[0] < 1:
            raise ValueError(f"probability map must be (classes, height, width), got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = values.sum(axis=0, dtype=np.float64)
        if values.shape[1] * values.shape[2] and np.abs(sums - 1.0).max() > PROB_ATOL:
            raise ValueError("per-pixel probabilities must sum to 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_unnormalized(cls, scores: np.ndarray) -> "ProbabilityMap":
        scores = np.asarray(scores, dtype=np.float64)
        total = scores.sum(axis=0, keepdims=True)
        return cls(normalize_float32(scores / total))

    @classmethod
    def uniform(cls, n_classes: int, shape: tuple[int, int]) -> "ProbabilityMap":
        return cls.from_unnormalized(np.ones((n_classes,) + tuple(shape)))

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    def digest(self) -> str:
        return _digest(self.values)


@dataclass(frozen=True)
class PatchGeometry:
    feature_patch_side: int = 10
    label_patch_side: int = 7
    stride: int = 1

    def __post_init__(self):
        if self.feature_patch_side < 1 or self.label_patch_side < 1 or self.stride < 1:
            raise ValueError("patch sides and stride must be >= 1")
        if self.label_patch_side > self.feature_patch_side:
            raise ValueError("label patch cannot be larger than the feature patch")


def _digest(arr: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def normalize_float32(p: np.ndarray) -> np.ndarray:
    """Cast per-pixel distributions (axis 0) to float32 and fix the rounding drift."""
    out = np.clip(np.asarray(p, dtype=np.float64), 0.0, None)
    out /= out.sum(axis=0, keepdims=True)
    out = out.astype(np.float32)
    # one renormalisation in float32 keeps |sum - 1| at a few ulp
    out /= out.sum(axis=0, keepdims=True, dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def window_offset(side: int) -> int:
    """Offset from the window's top-left to its centre pixel (top-left-of-centre for even sides)."""
    return side // 2


def extract_patch(img: MultiChannelImage | np.ndarray, center: tuple[int, int], side: int) -> np.ndarray:
    """Return the C x side x side block around ``center`` = (row, col) with edge replication."""
    data = img.data if isinstance(img, MultiChannelImage) else np.asarray(img)
    if data.ndim == 2:
        data = data[None]
    if side < 1:
        raise ValueError("side must be >= 1")
    r, c = center
    h, w = data.shape[1:]
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {center} outside image of shape {(h, w)}")
    top = r - window_offset(side)
    left = c - window_offset(side)
    rows = np.clip(np.arange(top, top + side), 0, h - 1)
    cols = np.clip(np.arange(left, left + side), 0, w - 1)
    return data[:, rows[:, None], cols[None, :]]


def argmax_labels(p: ProbabilityMap) -> LabelMap:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return LabelMap(np.argmax(p.values, axis=0), p.n_classes)


def average_maps(maps: list[ProbabilityMap]) -> ProbabilityMap:
    if not maps:
        raise ValueError("cannot average an empty list of maps")
    first = maps[0].values.shape
    for m in maps[1:]:
        if m.values.shape != first:
            raise ValueError(f"map shape mismatch: {m.values.shape} vs {first}")
    acc = np.zeros(first, dtype=np.float64)
    for m in maps:
        acc += m.values
    acc /= len(maps)
    return ProbabilityMap(normalize_float32(acc))


# --- MDI file format ---------------------------------------------------------

MDI_MAGIC = b"MDI1"
_HEADER = struct.Struct("<4sBIII")
_KIND_IMAGE, _KIND_LABELS, _KIND_PROBMAP = 0, 1, 2
_MAX_ELEMENTS = 1 << 31


def encode_mdi(obj: MultiChannelImage | LabelMap | ProbabilityMap) -> bytes:
    if isinstance(obj, MultiChannelImage):
        kind, arr, depth = _KIND_IMAGE, obj.data, obj.channels
    elif isinstance(obj, LabelMap):
        kind, arr, depth = _KIND_LABELS, obj.labels, obj.n_classes
    elif isinstance(obj, ProbabilityMap):
        kind, arr, depth = _KIND_PROBMAP, obj.values, obj.n_classes
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    h, w = arr.shape[-2:]
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return _HEADER.pack(MDI_MAGIC, kind, w, h, depth) + payload


def decode_mdi(buf: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, kind, w, h, depth = _HEADER.unpack_from(buf, 0)
    if magic != MDI_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if kind not in (_KIND_IMAGE, _KIND_LABELS, _KIND_PROBMAP):
        raise FormatError(f"unknown kind {kind}", 4)
    planes = 1 if kind == _KIND_LABELS else depth
    n = w * h * planes
    if w == 0 or h == 0 or depth == 0 or n >= _MAX_ELEMENTS:
        raise FormatError(f"dimension overflow or zero size ({w}x{h}x{depth})", 5)
    dtype = np.dtype("<u1") if kind == _KIND_LABELS else np.dtype("<f4")
    need = _HEADER.size + n * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after payload", need)
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=_HEADER.size)
    if kind == _KIND_LABELS:
        labels = arr.reshape(h, w)
        if labels.max() >= depth:
            bad = int(np.argmax(labels.reshape(-1) >= depth))
            raise FormatError(f"label {labels.reshape(-1)[bad]} >= class count {depth}", _HEADER.size + bad)
        return LabelMap(labels.copy(), depth)
    arr = arr.reshape(planes, h, w).astype(np.float32)
    if kind == _KIND_IMAGE:
        return MultiChannelImage(arr)
    return ProbabilityMap(arr)


def write_mdi(path: str | Path, obj) -> None:
    Path(path).write_bytes(encode_mdi(obj))


def read_mdi(path: str | Path):
    return decode_mdi(Path(path).read_bytes())


# --- PNG export (inspection only) ---------------------------------------------

PALETTE = np.array(
    [[0, 0, 0], [255, 215, 0], [220, 20, 60], [30, 144, 255], [50, 205, 50],
     [255, 140, 0], [148, 0, 211], [0, 206, 209], [255, 255, 255]],
    dtype=np.uint8,
)


def to_rgb_labels(labels: LabelMap) -> np.ndarray:
    return PALETTE[labels.labels % len(PALETTE)]


def to_gray(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    scaled = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    return np.round(scaled * 255).astype(np.uint8)


def save_png(path: str | Path, pixels: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(pixels)).save(path)
