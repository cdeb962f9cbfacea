"""Localization difficulty from how quickly a class's region scores accumulate.

An image is easy for class c when a handful of proposals carries nearly all
of the class's score mass. The energy curve is the normalized running sum of
the descending-sorted scores; EAS at level t divides the curve value where it
first reaches t by the number of regions that took; mEAS averages EAS over
the eleven levels 0, 0.1, ..., 1. Higher mEAS means easier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import ImageRecord, ScoreKind, ScoreMatrix, ValidationError

log = logging.getLogger(__name__)

#: energy levels as integer tenths, so the grid never drifts
LEVELS_TENTHS = tuple(range(11))
# absorbs prefix-sum rounding when comparing against a level
_LEVEL_TOL = 1e-12


@dataclass(frozen=True)
class EnergyCurve:
    sorted_scores: np.ndarray
    accumulated: np.ndarray
    order: np.ndarray  # original region index of each sorted entry

    def __len__(self) -> int:
        return len(self.accumulated)


@dataclass(frozen=True)
class DifficultyReport:
    image_id: str
    meas: Mapping[int, float] = field(default_factory=dict)

    @property
    def difficulty(self) -> float:
        """Mean mEAS over the image's positive classes (higher is easier)."""
        if not self.meas:
            raise ValidationError(f"{self.image_id}: report has no classes")
        return float(np.mean([self.meas[c] for c in sorted(self.meas)]))


def accumulate(scores_row: Sequence[float]) -> EnergyCurve:
    row = np.asarray(scores_row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValidationError("score row must be a non-empty vector")
    if np.any(row < 0) or not np.all(np.isfinite(row)):
        raise ValidationError("score row must be finite and non-negative")
    total = row.sum()
    if total <= 0:
        raise ValidationError("no evidence for class: all region scores are zero")
    # stable sort on the negated row keeps equal scores in index order
    order = np.argsort(-row, kind="stable")
    sorted_scores = row[order]
    acc = np.cumsum(sorted_scores) / total
    acc[-1] = 1.0
    np.minimum(acc, 1.0, out=acc)
    return EnergyCurve(sorted_scores, acc, order)


def _first_reaching(curve: EnergyCurve, tenths: int) -> int:
    """0-based index of the first curve entry at or above level ``tenths / 10``."""
    target = tenths / 10.0 - _LEVEL_TOL
    return int(np.searchsorted(curve.accumulated, target, side="left"))


def eas(curve: EnergyCurve, t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"energy level {t} outside [0, 1]")
    j = int(np.searchsorted(curve.accumulated, t - _LEVEL_TOL, side="left"))
    j = min(j, len(curve) - 1)
    return float(curve.accumulated[j] / (j + 1))


def meas(curve: EnergyCurve) -> float:
    total = 0.0
    for tenths in LEVELS_TENTHS:
        j = min(_first_reaching(curve, tenths), len(curve) - 1)
        total += curve.accumulated[j] / (j + 1)
    return float(total / len(LEVELS_TENTHS))


def difficulty_report(rec: ImageRecord, scores: ScoreMatrix) -> DifficultyReport:
    """mEAS for every positive class of ``rec``.

    Classes whose score row is all zero are left out of the report and logged.
    """
    if scores.kind is not ScoreKind.NORMALIZED:
        raise ValidationError(f"difficulty needs normalized scores, got {scores.kind.value}")
    if scores.values.shape != (rec.class_count, len(rec.proposals)):
        raise ValidationError(
            f"{rec.image_id}: score shape {scores.values.shape} does not match "
            f"{rec.class_count} classes x {len(rec.proposals)} proposals"
        )
    out = {}
    for c in rec.positive_classes:
        try:
            out[c] = meas(accumulate(scores.values[c]))
        except ValidationError as exc:
            log.warning("%s class %d: %s", rec.image_id, c, exc)
    return DifficultyReport(rec.image_id, out)


def class_mean_meas(reports: Iterable[DifficultyReport], class_index: int) -> float:
    values = [r.meas[class_index] for r in reports if class_index in r.meas]
    if not values:
        raise ValidationError(f"class {class_index} appears in no report")
    return float(np.mean(values))
