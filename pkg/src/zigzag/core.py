"""Domain types shared by every stage, plus box geometry and proposal labeling.

Boxes use continuous image coordinates with the origin at the top-left corner
and area ``(x_max - x_min) * (y_max - y_min)``; there is no VOC-style "+1".
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BBox",
    "ImageRecord",
    "MinedInstance",
    "ProposalLabel",
    "Role",
    "ScoreKind",
    "ScoreMatrix",
    "ValidationError",
    "iou",
    "iou_matrix",
    "label_proposals",
    "POSITIVE_IOU",
    "HARD_NEGATIVE_IOU",
]

POSITIVE_IOU = 0.5
HARD_NEGATIVE_IOU = 0.1


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True, order=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        try:
            coords = tuple(float(c) for c in coords)
        except (TypeError, ValueError):
            raise ValidationError(f"box coordinates must be numbers: {coords}") from None
        for name, c in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, c)
        if not all(np.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(f"inverted box: {coords}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> BBox:
        if len(values) != 4:
            raise ValidationError(f"a box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: BBox) -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )

    def inside_image(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes.

    Zero-area boxes have IoU 0 with everything, themselves included, so the
    result is never a 0/0.
    """
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of xyxy boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


@dataclass(frozen=True)
class ImageRecord:
    """One image: size, its proposal set and its image-level label vector.

    ``labels`` holds +1 (class present) or -1 (absent) for each of the C
    dataset classes.
    """

    image_id: str
    width: int
    height: int
    proposals: tuple[BBox, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"{self.image_id}: image size must be positive")
        for i, box in enumerate(self.proposals):
            if not box.inside_image(self.width, self.height):
                raise ValidationError(
                    f"{self.image_id}: proposal {i} {box.to_list()} lies outside "
                    f"{self.width}x{self.height}"
                )
        bad = [v for v in self.labels if v not in (1, -1)]
        if bad:
            raise ValidationError(f"{self.image_id}: labels must be +1/-1, got {bad}")

    @property
    def class_count(self) -> int:
        return len(self.labels)

    @property
    def positive_classes(self) -> list[int]:
        return [c for c, y in enumerate(self.labels) if y == 1]

    def proposal_array(self) -> np.ndarray:
        return boxes_to_array(self.proposals)


class ScoreKind(str, enum.Enum):
    RAW_CLS_STREAM = "raw_cls_stream"
    RAW_DET_STREAM = "raw_det_stream"
    NORMALIZED = "normalized"
    # per-region class probabilities from a trained detector
    DETECTION = "detection"


@dataclass(frozen=True)
class ScoreMatrix:
    """C x |R| region scores for one image."""

    values: np.ndarray
    kind: ScoreKind

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"score matrix must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("score matrix contains non-finite entries")
        kind = ScoreKind(self.kind)
        if kind in (ScoreKind.NORMALIZED, ScoreKind.DETECTION) and np.any(values < 0):
            raise ValidationError(f"{kind.value} scores must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", kind)

    @property
    def class_count(self) -> int:
        return self.values.shape[0]

    @property
    def region_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MinedInstance:
    image_id: str
    class_index: int
    box: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")


class Role(str, enum.Enum):
    POSITIVE = "positive"
    HARD_NEGATIVE = "hard_negative"
    IGNORED = "ignored"


@dataclass(frozen=True)
class ProposalLabel:
    proposal_index: int
    role: Role
    # class of the best-overlapping mined instance; None when ignored
    class_index: int | None = None
    instance_index: int | None = None
    overlap: float = field(default=0.0, compare=False)


def label_proposals(rec: ImageRecord, mined: Sequence[MinedInstance]) -> list[ProposalLabel]:
    """Assign every proposal a training role from its best overlap with the mined boxes.

    max IoU >= 0.5 is positive, [0.1, 0.5) is a hard negative, anything lower
    is ignored. Both thresholds are inclusive on their lower edge.
    """
    for inst in mined:
        if inst.image_id != rec.image_id:
            raise ValidationError(
                f"mined instance of {inst.image_id!r} passed for image {rec.image_id!r}"
            )
    n = len(rec.proposals)
    if not mined:
        return [ProposalLabel(i, Role.IGNORED) for i in range(n)]
    overlaps = iou_matrix(rec.proposal_array(), boxes_to_array(m.box for m in mined))
    best = overlaps.argmax(axis=1)
    labels = []
    for i in range(n):
        j = int(best[i])
        m = float(overlaps[i, j])
        if m >= POSITIVE_IOU:
            role = Role.POSITIVE
        elif m >= HARD_NEGATIVE_IOU:
            role = Role.HARD_NEGATIVE
        else:
            labels.append(ProposalLabel(i, Role.IGNORED, overlap=m))
            continue
        labels.append(ProposalLabel(i, role, mined[j].class_index, j, m))
    return labels
