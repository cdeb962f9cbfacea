"""Two-stream region score normalization and the image-level MIL loss."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ScoreKind, ScoreMatrix, ValidationError

LOG_EPS = 1e-12


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def class_factor(cls_stream: ScoreMatrix) -> np.ndarray:
    """Softmax over classes, independently for every region."""
    return _softmax(cls_stream.values, axis=0)


def region_factor(det_stream: ScoreMatrix) -> np.ndarray:
    """Softmax over regions, independently for every class."""
    return _softmax(det_stream.values, axis=1)


def normalize_two_stream(cls_stream: ScoreMatrix, det_stream: ScoreMatrix) -> ScoreMatrix:
    """Combine the classification and detection streams into region scores.

    Each entry is the class-softmax of the classification stream times the
    region-softmax of the detection stream, so a class row sums to at most 1.
    """
    if cls_stream.kind is not ScoreKind.RAW_CLS_STREAM:
        raise ValidationError(f"expected a raw_cls_stream matrix, got {cls_stream.kind.value}")
    if det_stream.kind is not ScoreKind.RAW_DET_STREAM:
        raise ValidationError(f"expected a raw_det_stream matrix, got {det_stream.kind.value}")
    if cls_stream.values.shape != det_stream.values.shape:
        raise ValidationError(
            f"stream shapes differ: {cls_stream.values.shape} vs {det_stream.values.shape}"
        )
    return ScoreMatrix(class_factor(cls_stream) * region_factor(det_stream), ScoreKind.NORMALIZED)


def image_probability(scores: ScoreMatrix) -> np.ndarray:
    """Per-class image-level probability: the sum of a class's region scores."""
    if scores.kind is not ScoreKind.NORMALIZED:
        raise ValidationError(f"image_probability needs normalized scores, got {scores.kind.value}")
    # rounding can push a saturated row a hair above 1
    return np.clip(scores.values.sum(axis=1), 0.0, 1.0)


def image_level_loss(probs: Sequence[float], labels: Sequence[int]) -> float:
    """Binary log loss over the C image-level predictions (summed, not averaged).

    A present class contributes ``-log(p)``, an absent one ``-log(1 - p)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValidationError(f"{p.shape[0]} probabilities for {y.shape[0]} labels")
    if not np.all((y == 1) | (y == -1)):
        raise ValidationError(f"labels must be +1/-1, got {sorted(set(y.tolist()))}")
    p = np.clip(p, LOG_EPS, 1.0 - LOG_EPS)
    return float(-np.sum(np.log(y * (p - 0.5) + 0.5)))
