"""Random fixture generators shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from zigzag.core import BBox, ImageRecord, ScoreKind, ScoreMatrix


def mining_fixture(rng: np.random.Generator):
    """Image of at most 64x64 with at most 20 proposals and one class row.

    Coordinates are integers or half-integers, so pixel centres can sit
    exactly on box edges. About one score in five is zero.
    """
    W, H = int(rng.integers(4, 65)), int(rng.integers(4, 65))
    n = int(rng.integers(1, 21))
    boxes = []
    for _ in range(n):
        # at least one pixel wide, so every box covers some pixel centre
        x0 = int(rng.integers(0, 2 * W - 1))
        y0 = int(rng.integers(0, 2 * H - 1))
        x1 = int(rng.integers(x0 + 2, 2 * W + 1))
        y1 = int(rng.integers(y0 + 2, 2 * H + 1))
        boxes.append((x0 / 2, y0 / 2, x1 / 2, y1 / 2))
    scores = rng.random(n) * (rng.random(n) > 0.2)
    if scores.max() == 0:
        scores[0] = 0.5
    rec = ImageRecord("fx", W, H, [BBox(*b) for b in boxes], [1])
    return rec, ScoreMatrix(scores[None, :], ScoreKind.NORMALIZED), boxes, scores


def uniform_row(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)
