"""Object mining from region scores: heat map, threshold, largest blob, tight box.

Pixels are unit squares; pixel ``(i, j)`` (column, row) is inside a proposal
when its centre ``(i + 0.5, j + 0.5)`` is. A box ``[0, 0, 10, 10]`` therefore
covers columns and rows 0..9, and the tight box of a blob is
``[min_col, min_row, max_col + 1, max_row + 1]`` scaled by the grid step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import BBox, ImageRecord, MinedInstance, ScoreMatrix, ScoreKind, ValidationError
from .scoring import image_probability

log = logging.getLogger(__name__)

BINARIZE_THRESHOLD = 0.5
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class MiningError(ValidationError):
    pass


@dataclass(frozen=True)
class HeatMap:
    """Max-normalized per-pixel vote map for one class; ``values`` is rows x cols."""

    values: np.ndarray
    width: int
    height: int
    class_index: int
    grid_step: int = 1


@dataclass(frozen=True)
class MiningFailure:
    image_id: str
    class_index: int
    reason: str


def _sample_span(lo: float, hi: float, step: int, n: int) -> tuple[int, int]:
    """Grid samples ``k`` with centre ``k*step + step/2`` in [lo, hi], as a half-open range."""
    start = math.ceil((lo - step / 2) / step)
    stop = math.floor((hi - step / 2) / step) + 1
    return max(start, 0), min(stop, n)


def heat_map(
    rec: ImageRecord,
    scores: ScoreMatrix,
    class_index: int,
    grid_step: int = 1,
) -> HeatMap:
    """Sum the scores of all proposals covering each pixel, then divide by the max.

    ``grid_step > 1`` evaluates the map on a coarser lattice of pixel centres
    (an approximation; 1 is exact).
    """
    if scores.kind is not ScoreKind.NORMALIZED:
        raise ValidationError(f"heat map needs normalized scores, got {scores.kind.value}")
    if scores.region_count != len(rec.proposals):
        raise ValidationError(
            f"{rec.image_id}: {scores.region_count} scores for {len(rec.proposals)} proposals"
        )
    if grid_step < 1:
        raise ValidationError("grid_step must be >= 1")
    row = scores.values[class_index]
    nx = math.ceil(rec.width / grid_step)
    ny = math.ceil(rec.height / grid_step)
    # 2-D difference array: +s at the top-left corner of each box, cancelled past its far edges
    diff = np.zeros((ny + 1, nx + 1), dtype=np.float64)
    for box, s in zip(rec.proposals, row):
        if s <= 0:
            continue
        x0, x1 = _sample_span(box.x_min, box.x_max, grid_step, nx)
        y0, y1 = _sample_span(box.y_min, box.y_max, grid_step, ny)
        if x0 >= x1 or y0 >= y1:
            continue
        diff[y0, x0] += s
        diff[y0, x1] -= s
        diff[y1, x0] -= s
        diff[y1, x1] += s
    acc = np.cumsum(np.cumsum(diff, axis=0), axis=1)[:ny, :nx]
    z = acc.max() if acc.size else 0.0
    if z <= 0:
        raise MiningError(f"{rec.image_id}: no positive evidence for class {class_index}")
    values = acc / z
    values[values < 0] = 0.0  # cancellation noise in empty areas
    return HeatMap(values, rec.width, rec.height, class_index, grid_step)


def mine_instance(hm: HeatMap, threshold: float = BINARIZE_THRESHOLD) -> BBox:
    """Tight box around the largest 8-connected blob of ``hm >= threshold``.

    Equal-sized blobs are resolved in favour of the one whose bounding box
    has the smallest top-left corner, compared on y first, then x.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold {threshold} outside (0, 1)")
    fg = hm.values >= threshold
    labels, count = ndimage.label(fg, structure=_EIGHT_CONNECTED)
    if count == 0:
        raise MiningError("empty foreground after binarization")
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    slices = ndimage.find_objects(labels)
    best = max(
        range(count),
        key=lambda k: (sizes[k], -slices[k][0].start, -slices[k][1].start, -k),
    )
    ys, xs = slices[best]
    s = hm.grid_step
    return BBox(
        float(xs.start * s),
        float(ys.start * s),
        float(min(xs.stop * s, hm.width)),
        float(min(ys.stop * s, hm.height)),
    )


def mine_all(
    rec: ImageRecord,
    scores: ScoreMatrix,
    *,
    threshold: float = BINARIZE_THRESHOLD,
    grid_step: int = 1,
    failures: list[MiningFailure] | None = None,
) -> list[MinedInstance]:
    """One mined instance per positive class of ``rec``.

    A class that cannot be mined is skipped; the reason is logged and, when
    ``failures`` is given, appended to it.
    """
    if not rec.positive_classes:
        raise ValidationError(f"{rec.image_id}: no positive class to mine")
    phi = image_probability(scores)
    out = []
    for c in rec.positive_classes:
        try:
            box = mine_instance(heat_map(rec, scores, c, grid_step), threshold)
        except MiningError as exc:
            log.warning("mining failed for %s class %d: %s", rec.image_id, c, exc)
            if failures is not None:
                failures.append(MiningFailure(rec.image_id, c, str(exc)))
            continue
        out.append(MinedInstance(rec.image_id, c, box, float(phi[c])))
    return out
