"""Reference detector adapters.

``SyntheticAdapter`` is a small softmax detector over pooled box features of
a feature grid; ``FileAdapter`` replays detection score dumps, one per
training phase, so externally produced scores can drive the loop.
"""

from __future__ import annotations

import copy
from typing import Mapping, Sequence

import numpy as np

from .core import BBox, ImageRecord, ScoreKind, ScoreMatrix, ValidationError
from .curriculum import AdapterError, DetectorAdapter, TrainingExample
from .masking import FeatureGrid, MaskPlan, apply_mask, map_pixel_to_feature

LOG_EPS = 1e-12


def axis_cell_counts(pixels: int, cells: int, stride: int) -> np.ndarray:
    """(pixels + 1) x cells table: entry [p, c] counts pixels 1..p that map to cell c."""
    cell_of = np.array([map_pixel_to_feature(u, u, stride)[0] for u in range(1, pixels + 1)]) - 1
    onehot = np.zeros((pixels + 1, cells))
    onehot[np.arange(1, pixels + 1), np.clip(cell_of, 0, cells - 1)] = 1.0
    return np.cumsum(onehot, axis=0)


class RegionPooler:
    """Sums feature-grid values over pixel boxes through per-axis overlap counts.

    A cell's value is spread uniformly over the pixels that map onto it, so
    the pooled sum over a box is ``Oy @ G @ Ox.T`` with ``Ox[n, c]`` the
    number of the box's columns that map to cell column ``c``.
    """

    def __init__(self, width: int, height: int, grid_shape: tuple[int, int], stride: int):
        self.width, self.height, self.stride = width, height, stride
        hf, wf = grid_shape
        self.cx = axis_cell_counts(width, wf, stride)
        self.cy = axis_cell_counts(height, hf, stride)
        self.footprint_x = self.cx[-1]
        self.footprint_y = self.cy[-1]

    def overlaps(self, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis overlap counts and pixel areas for (N, 4) boxes."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        u0 = np.clip(np.floor(b[:, 0]).astype(int), 0, self.width)
        u1 = np.clip(np.ceil(b[:, 2]).astype(int), 0, self.width)
        v0 = np.clip(np.floor(b[:, 1]).astype(int), 0, self.height)
        v1 = np.clip(np.ceil(b[:, 3]).astype(int), 0, self.height)
        ox = self.cx[u1] - self.cx[u0]
        oy = self.cy[v1] - self.cy[v0]
        area = (u1 - u0) * (v1 - v0)
        return ox, oy, area.astype(np.float64)

    @staticmethod
    def pool(values: np.ndarray, ox: np.ndarray, oy: np.ndarray) -> np.ndarray:
        """(N, channels) sums of ``values`` (channels x H x W) over the boxes."""
        ch, h, w = values.shape
        per_col = oy @ values.transpose(1, 0, 2).reshape(h, ch * w)
        return np.einsum("ncw,nw->nc", per_col.reshape(-1, ch, w), ox)

    def coverage(self, box: BBox) -> np.ndarray:
        """Fraction of every cell's pixel footprint covered by ``box`` (H x W)."""
        ox, oy, _ = self.overlaps(np.array([box.to_list()]))
        fx = np.where(self.footprint_x > 0, self.footprint_x, 1.0)
        fy = np.where(self.footprint_y > 0, self.footprint_y, 1.0)
        return np.outer(oy[0] / fy, ox[0] / fx)


def _ring_boxes(boxes: np.ndarray, ring: float, width: int, height: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    dw = ring * (b[:, 2] - b[:, 0])
    dh = ring * (b[:, 3] - b[:, 1])
    return np.stack(
        [
            np.clip(b[:, 0] - dw, 0, width),
            np.clip(b[:, 1] - dh, 0, height),
            np.clip(b[:, 2] + dw, 0, width),
            np.clip(b[:, 3] + dh, 0, height),
        ],
        axis=1,
    )


def _bin_boxes(boxes: np.ndarray, bins: int) -> list[np.ndarray]:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = (b[:, 2] - b[:, 0]) / bins
    h = (b[:, 3] - b[:, 1]) / bins
    out = []
    for j in range(bins):
        for i in range(bins):
            out.append(np.stack(
                [b[:, 0] + i * w, b[:, 1] + j * h, b[:, 0] + (i + 1) * w, b[:, 1] + (j + 1) * h],
                axis=1,
            ))
    return out


class _ImageCache:
    def __init__(self, rec: ImageRecord, grid: FeatureGrid, ring: float, bins: int = 1):
        self.grid = grid
        self.pooler = RegionPooler(
            rec.width, rec.height, (grid.height_f, grid.width_f), grid.stride
        )
        boxes = rec.proposal_array()
        self.boxes = boxes
        self.inner = self.pooler.overlaps(boxes)
        self.outer = self.pooler.overlaps(_ring_boxes(boxes, ring, rec.width, rec.height))
        self.bins = [self.pooler.overlaps(bb) for bb in _bin_boxes(boxes, bins)] if bins > 1 else []
        cx = (boxes[:, 0] + boxes[:, 2]) / 2 / rec.width - 0.5
        cy = (boxes[:, 1] + boxes[:, 3]) / 2 / rec.height - 0.5
        rel_area = np.maximum(self.inner[2], 1.0) / (rec.width * rec.height)
        self.geometry = np.stack([np.log(rel_area), np.hypot(cx, cy)], axis=1)
        self.plain = self._features(grid.values, np.arange(len(boxes)))

    def _features(self, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
        ox, oy, area = (a[idx] for a in self.inner)
        rx, ry, rarea = (a[idx] for a in self.outer)
        inside = self.pooler.pool(values, ox, oy)
        around = self.pooler.pool(values, rx, ry) - inside
        ring_area = rarea - area
        mean_in = inside / np.maximum(area, 1.0)[:, None]
        mean_ring = np.where(
            (ring_area > 0)[:, None], around / np.maximum(ring_area, 1.0)[:, None], mean_in
        )
        parts = [mean_in, mean_in - mean_ring, self.geometry[idx]]
        for bx, by, barea in self.bins:
            parts.append(self.pooler.pool(values, bx[idx], by[idx]) / np.maximum(barea[idx], 1.0)[:, None])
        return np.hstack(parts)

    def features(self, idx: np.ndarray, masks: Sequence[MaskPlan] = ()) -> np.ndarray:
        if not any(m.mapped_cells for m in masks):
            return self.plain[idx]
        return self._features(apply_mask(self.grid, *masks).values, idx)


class SyntheticAdapter(DetectorAdapter):
    """Softmax detector (C classes + background) over hand-crafted box features.

    Each proposal is described by the in-box mean of every feature channel,
    the contrast between that mean and a surrounding ring, its log relative
    area and its centre offset from the image centre. Training minimizes the
    confidence-weighted log loss with full-batch Adam steps.

    Args:
        features: feature grid per image id.
        records: image records the grids belong to.
        class_count: number of object classes C.
        steps_per_phase: Adam steps per training phase.
        learning_rate: Adam step size.
        l2: weight decay on the non-bias weights.
        ring: ring width around a box, as a fraction of its size.
    """

    def __init__(
        self,
        features: Mapping[str, FeatureGrid],
        records: Mapping[str, ImageRecord],
        class_count: int,
        *,
        steps_per_phase: int = 60,
        learning_rate: float = 0.05,
        l2: float = 1e-3,
        ring: float = 0.3,
        bins: int = 1,
    ):
        self.class_count = class_count
        self.steps_per_phase = steps_per_phase
        self.learning_rate = learning_rate
        self.l2 = l2
        self._cache: dict[str, _ImageCache] = {}
        for image_id in sorted(records):
            if image_id not in features:
                continue
            self._cache[image_id] = _ImageCache(records[image_id], features[image_id], ring, bins)
        if not self._cache:
            raise ValidationError("synthetic adapter needs at least one feature grid")
        stacked = np.vstack([c.plain for c in self._cache.values()])
        self._mu = stacked.mean(axis=0)
        self._sigma = np.where(stacked.std(axis=0) > 1e-9, stacked.std(axis=0), 1.0)
        dim = stacked.shape[1] + 1
        self.weights = np.zeros((dim, class_count + 1))
        self._m = np.zeros_like(self.weights)
        self._v = np.zeros_like(self.weights)
        self._t = 0

    def _design(self, raw: np.ndarray) -> np.ndarray:
        z = (raw - self._mu) / self._sigma
        return np.hstack([z, np.ones((len(z), 1))])

    def _probs(self, x: np.ndarray) -> np.ndarray:
        logits = x @ self.weights
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def _cache_for(self, rec: ImageRecord) -> _ImageCache:
        try:
            cache = self._cache[rec.image_id]
        except KeyError:
            raise AdapterError(f"no feature grid for image {rec.image_id!r}") from None
        if len(cache.boxes) != len(rec.proposals):
            raise AdapterError(f"{rec.image_id}: proposal count changed since caching")
        return cache

    def score(self, rec: ImageRecord, masks: Sequence[MaskPlan] = ()) -> ScoreMatrix:
        cache = self._cache_for(rec)
        x = self._design(cache.features(np.arange(len(rec.proposals)), masks))
        return ScoreMatrix(self._probs(x)[:, : self.class_count].T, ScoreKind.DETECTION)

    def train_step(self, examples: Sequence[TrainingExample]) -> float:
        xs, targets, weights = [], [], []
        for ex in examples:
            if not ex.samples:
                continue
            cache = self._cache_for(ex.rec)
            idx = np.array([s.proposal_index for s in ex.samples])
            xs.append(self._design(cache.features(idx, ex.masks)))
            targets.extend(
                self.class_count if s.class_index is None else s.class_index for s in ex.samples
            )
            weights.extend(s.weight for s in ex.samples)
        if not xs:
            return 0.0
        x = np.vstack(xs)
        y = np.asarray(targets)
        w = np.asarray(weights, dtype=np.float64)
        p = self._probs(x)
        n = len(y)
        p_true = p[np.arange(n), y]
        loss = float(np.sum(-w * np.log(np.maximum(p_true, LOG_EPS))) / n)
        onehot = np.zeros_like(p)
        onehot[np.arange(n), y] = 1.0
        grad = x.T @ ((p - onehot) * w[:, None]) / n
        grad[:-1] += self.l2 * self.weights[:-1]
        self._adam(grad)
        return loss

    def _adam(self, grad: np.ndarray, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self._t += 1
        self._m = b1 * self._m + (1 - b1) * grad
        self._v = b2 * self._v + (1 - b2) * grad * grad
        m_hat = self._m / (1 - b1 ** self._t)
        v_hat = self._v / (1 - b2 ** self._t)
        self.weights = self.weights - self.learning_rate * m_hat / (np.sqrt(v_hat) + eps)

    def snapshot(self) -> SyntheticAdapter:
        snap = copy.copy(self)  # shares the read-only feature caches
        snap.weights = self.weights.copy()
        snap._m = self._m.copy()
        snap._v = self._v.copy()
        return snap


class FileAdapter(DetectorAdapter):
    """Replays per-phase detection score dumps.

    ``phases[k]`` maps image ids to the scores the model produces after
    training phase ``k + 1``. Scoring before any training is an error.
    """

    steps_per_phase = 1

    def __init__(self, phases: Sequence[Mapping[str, ScoreMatrix]]):
        if not phases:
            raise ValidationError("file adapter needs at least one phase of score dumps")
        self.phases = list(phases)
        self.trained = 0

    def score(self, rec: ImageRecord, masks: Sequence[MaskPlan] = ()) -> ScoreMatrix:
        if self.trained == 0:
            raise AdapterError("file adapter has not been trained")
        phase = self.phases[min(self.trained, len(self.phases)) - 1]
        try:
            return phase[rec.image_id]
        except KeyError:
            raise AdapterError(f"no dumped scores for {rec.image_id!r}") from None

    def train_step(self, examples: Sequence[TrainingExample]) -> float:
        self.trained += 1
        return 0.0

    def snapshot(self) -> FileAdapter:
        snap = FileAdapter(self.phases)
        snap.trained = self.trained
        return snap
