"""CorLoc, VOC average precision and a simplified detection-error breakdown."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BBox, ValidationError, iou

MATCH_IOU = 0.5
ERROR_IOU = 0.1
ERROR_CATEGORIES = ("Cor", "Loc", "Sim", "Oth", "BG")


@dataclass(frozen=True)
class GTObject:
    class_index: int
    box: BBox
    difficult: bool = False


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    objects: tuple[GTObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def classes(self) -> set[int]:
        return {o.class_index for o in self.objects}

    def boxes_of(self, class_index: int) -> list[BBox]:
        return [o.box for o in self.objects if o.class_index == class_index]


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_index: int
    box: BBox
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValidationError(f"non-finite detection score {self.score}")


@dataclass
class CorLocResult:
    per_class: dict[int, float] = field(default_factory=dict)
    hits: dict[int, int] = field(default_factory=dict)
    totals: dict[int, int] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        if not self.per_class:
            return float("nan")
        return float(np.mean([self.per_class[c] for c in sorted(self.per_class)]))


def corloc(
    predictions: Mapping[tuple[str, int], BBox],
    gts: Mapping[str, GroundTruth],
) -> CorLocResult:
    """Fraction of (image, class) pairs localized with IoU >= 0.5, per class.

    ``predictions`` maps (image_id, class_index) to one box. Every class
    present in an image's ground truth counts; a missing prediction counts as
    a miss. A prediction for a class the image does not contain is an error.
    """
    for image_id, c in predictions:
        gt = gts.get(image_id)
        if gt is None or c not in gt.classes():
            raise ValidationError(f"prediction for class {c} absent from image {image_id!r}")
    result = CorLocResult()
    for image_id in sorted(gts):
        gt = gts[image_id]
        for c in sorted(gt.classes()):
            result.totals[c] = result.totals.get(c, 0) + 1
            box = predictions.get((image_id, c))
            hit = box is not None and any(iou(box, g) >= MATCH_IOU for g in gt.boxes_of(c))
            result.hits[c] = result.hits.get(c, 0) + int(hit)
    for c in result.totals:
        result.per_class[c] = result.hits[c] / result.totals[c]
    return result


@dataclass(frozen=True)
class Match:
    """Outcome for one ranked detection: ``status`` is "tp", "fp" or "ignored"."""

    detection_index: int
    status: str
    gt_index: int | None
    overlap: float


def rank_detections(dets: Sequence[Detection]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence[Detection],
    gts: Mapping[str, GroundTruth],
    class_index: int,
) -> list[Match]:
    """Greedy VOC matching in descending score order.

    Each detection is compared with its best-overlapping ground truth of the
    class. IoU >= 0.5 against an unclaimed box is a true positive; against a
    difficult box it is ignored; against a box already claimed it is a
    duplicate and so a false positive. Anything else is a false positive.
    """
    claimed: set[tuple[str, int]] = set()
    out = []
    for i in rank_detections(dets):
        d = dets[i]
        gt = gts.get(d.image_id)
        objs = [] if gt is None else [
            (k, o) for k, o in enumerate(gt.objects) if o.class_index == class_index
        ]
        best_k, best = None, 0.0
        for k, o in objs:
            ov = iou(d.box, o.box)
            if ov > best:
                best_k, best = k, ov
        if best_k is None or best < MATCH_IOU:
            out.append(Match(i, "fp", None, best))
        elif gt.objects[best_k].difficult:
            out.append(Match(i, "ignored", best_k, best))
        elif (d.image_id, best_k) in claimed:
            out.append(Match(i, "fp", best_k, best))
        else:
            claimed.add((d.image_id, best_k))
            out.append(Match(i, "tp", best_k, best))
    return out


def average_precision(
    dets: Iterable[Detection],
    gts: Mapping[str, GroundTruth],
    class_index: int,
    mode: str = "eleven_point",
) -> float:
    """VOC average precision at IoU 0.5 for one class.

    ``mode="eleven_point"`` is the VOC2007 metric (mean of the best precision
    at recall >= 0, 0.1, ..., 1); ``mode="area"`` integrates the monotone
    precision envelope exactly. Returns NaN when the class has no
    non-difficult ground truth.
    """
    if mode not in ("eleven_point", "area"):
        raise ValidationError(f"unknown AP mode {mode!r}")
    dets = [d for d in dets if d.class_index == class_index]
    npos = sum(
        1 for g in gts.values() for o in g.objects
        if o.class_index == class_index and not o.difficult
    )
    if npos == 0:
        return float("nan")
    matches = [m for m in match_detections(dets, gts, class_index) if m.status != "ignored"]
    tp = np.cumsum([m.status == "tp" for m in matches], dtype=np.int64)
    fp = np.cumsum([m.status == "fp" for m in matches], dtype=np.int64)
    if len(matches) == 0:
        return 0.0
    precision = tp / (tp + fp)
    if mode == "eleven_point":
        total = 0.0
        for tenths in range(11):
            # recall >= tenths/10, compared in integers
            reached = tp * 10 >= tenths * npos
            total += precision[reached].max() if reached.any() else 0.0
        return float(total / 11)
    recall = np.concatenate([[0.0], tp / npos, [1.0]])
    prec = np.concatenate([[0.0], precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * prec[steps + 1]))


def mean_average_precision(
    dets: Sequence[Detection],
    gts: Mapping[str, GroundTruth],
    class_count: int,
    mode: str = "eleven_point",
) -> tuple[dict[int, float], float]:
    per_class = {c: average_precision(dets, gts, c, mode) for c in range(class_count)}
    valid = [v for v in per_class.values() if not np.isnan(v)]
    return per_class, float(np.mean(valid)) if valid else float("nan")


def _group_lookup(similarity_groups: Sequence[Iterable[int]]) -> dict[int, int]:
    lookup: dict[int, int] = {}
    for g, members in enumerate(similarity_groups):
        for c in members:
            if c in lookup:
                raise ValidationError(f"class {c} appears in more than one similarity group")
            lookup[c] = g
    return lookup


def categorize_error(
    det: Detection, gt: GroundTruth | None, group_of: Mapping[int, int]
) -> str:
    objs = () if gt is None else gt.objects
    own = max((iou(det.box, o.box) for o in objs if o.class_index == det.class_index), default=0.0)
    if own >= MATCH_IOU:
        return "Cor"
    if own >= ERROR_IOU:
        return "Loc"
    others = [(o.class_index, iou(det.box, o.box)) for o in objs if o.class_index != det.class_index]
    group = group_of.get(det.class_index)
    if group is not None and any(
        ov >= ERROR_IOU and group_of.get(c) == group for c, ov in others
    ):
        return "Sim"
    if any(ov >= ERROR_IOU for _, ov in others):
        return "Oth"
    return "BG"


def categorize_errors(
    dets: Iterable[Detection],
    gts: Mapping[str, GroundTruth],
    similarity_groups: Sequence[Iterable[int]],
) -> Counter:
    """Histogram of detections over Cor / Loc / Sim / Oth / BG.

    Rules are applied per detection, in that order: own-class IoU >= 0.5 is
    Cor, own-class IoU in [0.1, 0.5) is Loc, IoU >= 0.1 with another class of
    the same similarity group is Sim, with any other class Oth, else BG.
    """
    group_of = _group_lookup(similarity_groups)
    hist = Counter({k: 0 for k in ERROR_CATEGORIES})
    for d in dets:
        hist[categorize_error(d, gts.get(d.image_id), group_of)] += 1
    return hist
