"""Core value types shared across the refinement pipeline.

Everything here is an immutable value object after construction; instances
are safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateBox,
    DimensionMismatch,
    InvariantViolation,
    KeyNotFound,
    NonFiniteFeature,
    ZeroNormVector,
)

N_REGISTERS = 4
DEFAULT_GRID = (14, 14)

SPLIT_SEEN = "seen"
SPLIT_UNSEEN = "unseen"
FREQ_GROUPS = ("rare", "common", "frequent", "none")


@dataclass(frozen=True)
class FeatureBundle:
    """Frozen-backbone features for one image.

    ``g`` is the global token, ``r`` the four register tokens, ``p`` the
    patch tokens flattened row-major over ``grid``, and ``m_img`` the
    teacher's global image feature used as the distillation target.
    """

    image_id: str
    g: np.ndarray          # (d_g,)
    r: np.ndarray          # (4, d_r)
    p: np.ndarray          # (grid_h * grid_w, d_p)
    m_img: np.ndarray      # (d_t,)
    grid: tuple[int, int] = DEFAULT_GRID

    @property
    def d_g(self) -> int:
        return int(self.g.shape[-1])

    @property
    def d_r(self) -> int:
        return int(self.r.shape[-1])

    @property
    def d_p(self) -> int:
        return int(self.p.shape[-1])

    @property
    def d_t(self) -> int:
        return int(self.m_img.shape[-1])

    def patch_grid(self) -> np.ndarray:
        """Patch tokens reshaped to (grid_h, grid_w, d_p)."""
        h, w = self.grid
        return self.p.reshape(h, w, self.d_p)


def validate_bundle(b: FeatureBundle) -> None:
    """Raise unless ``b`` satisfies all FeatureBundle invariants."""
    if b.g.ndim != 1:
        raise DimensionMismatch(f"global token must be 1-D, got shape {b.g.shape}")
    if b.r.ndim != 2 or b.r.shape[0] != N_REGISTERS:
        raise DimensionMismatch(
            f"expected exactly {N_REGISTERS} register tokens, got shape {b.r.shape}"
        )
    h, w = b.grid
    if h <= 0 or w <= 0:
        raise DimensionMismatch(f"invalid grid {b.grid}")
    if b.p.ndim != 2 or b.p.shape[0] != h * w:
        raise DimensionMismatch(
            f"expected {h * w} patch tokens for grid {b.grid}, got shape {b.p.shape}"
        )
    if b.m_img.ndim != 1:
        raise DimensionMismatch(f"teacher feature must be 1-D, got shape {b.m_img.shape}")
    for name, arr in (("g", b.g), ("r", b.r), ("p", b.p), ("m_img", b.m_img)):
        if not np.isfinite(arr).all():
            raise NonFiniteFeature(f"bundle {b.image_id!r}: non-finite entry in {name}")


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned box in normalized image coordinates [0, 1]."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not (0.0 <= v <= 1.0):
                raise DegenerateBox(f"coordinate {v} outside [0, 1]")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"empty box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def normalize_box(pixel_box: Sequence[float], image_w: float, image_h: float) -> Box:
    """Convert a corner-format pixel box (x0, y0, x1, y1) to a normalized Box.

    Coordinates are divided by the image size and clamped to [0, 1];
    boxes that collapse to zero width or height are rejected.
    """
    if image_w <= 0 or image_h <= 0:
        raise DegenerateBox(f"non-positive image size {image_w}x{image_h}")
    x0, y0, x1, y1 = pixel_box
    x0 = min(max(x0 / image_w, 0.0), 1.0)
    x1 = min(max(x1 / image_w, 0.0), 1.0)
    y0 = min(max(y0 / image_h, 0.0), 1.0)
    y1 = min(max(y1 / image_h, 0.0), 1.0)
    if not (x0 < x1 and y0 < y1):
        raise DegenerateBox(f"box {tuple(pixel_box)} degenerate after normalization")
    return Box(x0, y0, x1, y1)


def box_iou(a: Box, b: Box) -> float:
    """Standard intersection-over-union on normalized boxes."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Detection:
    """One base-detector output record.

    ``pixel_bbox`` keeps the original COCO-style (x, y, w, h) payload so
    refined results can be written back without re-deriving pixel numbers.
    """

    box: Box
    category_id: int
    p_det: float
    pixel_bbox: Optional[tuple[float, float, float, float]] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_det <= 1.0):
            raise InvariantViolation(f"p_det {self.p_det} outside [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    """Ordered detections for one image; order survives refinement."""

    image_id: object
    detections: tuple[Detection, ...]

    def __len__(self) -> int:
        return len(self.detections)


@dataclass(frozen=True)
class CategoryEntry:
    category_id: int
    raw_name: str
    normalized_name: str
    split: str = SPLIT_SEEN
    freq_group: str = "none"

    def __post_init__(self) -> None:
        if self.split not in (SPLIT_SEEN, SPLIT_UNSEEN):
            raise InvariantViolation(f"bad split {self.split!r}")
        if self.freq_group not in FREQ_GROUPS:
            raise InvariantViolation(f"bad freq_group {self.freq_group!r}")


@dataclass(frozen=True)
class CategoryVocabulary:
    entries: tuple[CategoryEntry, ...]

    def __post_init__(self) -> None:
        ids = [e.category_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("duplicate category ids in vocabulary")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [e.category_id for e in self.entries]

    def sorted_ids(self) -> list[int]:
        return sorted(e.category_id for e in self.entries)

    def entry(self, category_id: int) -> CategoryEntry:
        for e in self.entries:
            if e.category_id == category_id:
                return e
        raise KeyNotFound(f"category id {category_id} not in vocabulary")

    def seen_ids(self) -> list[int]:
        return [e.category_id for e in self.entries if e.split == SPLIT_SEEN]

    def unseen_ids(self) -> list[int]:
        return [e.category_id for e in self.entries if e.split == SPLIT_UNSEEN]


class TextEmbeddingTable:
    """Per-category teacher-space text vectors, looked up by category id."""

    def __init__(self, category_ids: Sequence[int], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(category_ids):
            raise DimensionMismatch(
                f"need one vector per category: {vectors.shape} vs {len(category_ids)} ids"
            )
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if (norms == 0.0).any():
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise InvariantViolation(
                f"text embedding for category {category_ids[bad]} has zero norm"
            )
        self.category_ids = [int(c) for c in category_ids]
        self.vectors = vectors
        self._row = {cid: i for i, cid in enumerate(self.category_ids)}

    @property
    def d_t(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.category_ids)

    def __contains__(self, category_id: int) -> bool:
        return int(category_id) in self._row

    def row(self, category_id: int) -> int:
        try:
            return self._row[int(category_id)]
        except KeyError:
            raise KeyNotFound(f"no text embedding for category id {category_id}") from None

    def vector(self, category_id: int) -> np.ndarray:
        return self.vectors[self.row(category_id)]

    def unit_vectors(self, dtype=np.float32) -> np.ndarray:
        """Row-normalized embedding matrix (C, d_t)."""
        v = self.vectors.astype(dtype)
        return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class RefinerOutput:
    """Encoder outputs: class vector plus per-cell patch vectors."""

    v_cls: np.ndarray   # (d,)
    v_patch: np.ndarray  # (grid_h * grid_w, d)
    grid: tuple[int, int] = DEFAULT_GRID


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the refinement encoder and its training loop."""

    d: int = 512
    n_layers: int = 2
    n_heads: int = 8
    mlp_ratio: int = 4
    tau: float = 0.03
    lambda1: float = 0.1
    lambda2: float = 0.1
    label_smoothing: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 30
    batch_size: int = 64
    ema_decay: float = 0.999
    seed: int = 0
    roi_mode: str = "align"
    grad_clip: Optional[float] = None

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise InvariantViolation("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvariantViolation("distillation weights must be nonnegative")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise InvariantViolation("label_smoothing must lie in [0, 1)")
        for name in ("d", "n_layers", "n_heads", "mlp_ratio", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise InvariantViolation(f"{name} must be positive")
        if self.d % self.n_heads != 0:
            raise InvariantViolation("n_heads must divide d")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise InvariantViolation("ema_decay must lie in [0, 1]")
        if self.roi_mode not in ("align", "inclusion", "maxpool"):
            raise InvariantViolation(f"unknown roi_mode {self.roi_mode!r}")

    @property
    def s_cls(self) -> float:
        """Similarity logit scale 1/tau."""
        return 1.0 / self.tau

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvariantViolation(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass(frozen=True)
class FusionConfig:
    """Score fusion weights (detector, class vector, ROI vector).

    Weights are normalized to sum to 1 at construction, which makes
    normalization idempotent.
    """

    w_d: float = 0.8
    w_c: float = 0.1
    w_p: float = 0.1

    def __post_init__(self) -> None:
        for w in (self.w_d, self.w_c, self.w_p):
            if w < 0:
                raise InvariantViolation("fusion weights must be nonnegative")
        total = self.w_d + self.w_c + self.w_p
        if total <= 0:
            raise InvariantViolation("fusion weights must not all be zero")
        object.__setattr__(self, "w_d", self.w_d / total)
        object.__setattr__(self, "w_c", self.w_c / total)
        object.__setattr__(self, "w_p", self.w_p / total)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_d, self.w_c, self.w_p)

    @classmethod
    def parse(cls, text: str) -> "FusionConfig":
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 3:
            raise InvariantViolation(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)
