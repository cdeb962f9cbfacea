"""Easy-to-difficult progressive training with masking and weighted relocalization.

The loop over folds is sequential and carries state: model ``k`` starts from
model ``k - 1``, trains on the current instances of folds ``1..k`` (with
fresh random feature masks every step) and then relocalizes folds
``1..k+1``. Relocalized instances replace the earlier ones, including the
initial mined seeds of the fold being entered.
"""

from __future__ import annotations

import abc
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    BBox,
    ImageRecord,
    MinedInstance,
    Role,
    ScoreKind,
    ScoreMatrix,
    ValidationError,
    label_proposals,
)
from .difficulty import DifficultyReport
from .evaluation import GroundTruth, corloc
from .masking import FEATURE_STRIDE, MaskPlan, plan_mask

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


class AdapterError(RuntimeError):
    """A detector adapter could not score or train on an image."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightedSample:
    proposal_index: int
    box: BBox
    class_index: int | None  # None marks a background (hard negative) sample
    role: Role
    weight: float


@dataclass(frozen=True)
class TrainingExample:
    rec: ImageRecord
    samples: tuple[WeightedSample, ...]
    masks: tuple[MaskPlan, ...] = ()


class DetectorAdapter(abc.ABC):
    """What the zigzag loop needs from a detector.

    ``score`` must be deterministic given the adapter state; ``train_step``
    is the only call that mutates it. ``steps_per_phase`` train steps make
    up one training phase.
    """

    steps_per_phase: int = 1

    @abc.abstractmethod
    def score(self, rec: ImageRecord, masks: Sequence[MaskPlan] = ()) -> ScoreMatrix:
        """C x |R| detection scores in [0, 1]."""

    @abc.abstractmethod
    def train_step(self, examples: Sequence[TrainingExample]) -> float:
        """One update on the batch; returns the mean weighted loss."""

    @abc.abstractmethod
    def snapshot(self) -> DetectorAdapter:
        """Frozen copy of the current model."""


@dataclass
class ZigzagDataset:
    class_names: list[str]
    records: dict[str, ImageRecord]
    reports: dict[str, DifficultyReport]
    instances: dict[str, list[MinedInstance]]
    ground_truth: dict[str, GroundTruth] | None = None


@dataclass
class IterationLog:
    iteration: int
    trained_images: int = 0
    losses: list[float] = field(default_factory=list)
    relocalized_images: int = 0
    skipped_images: list[str] = field(default_factory=list)
    corloc: float | None = None
    corloc_by_fold: dict[int, float] = field(default_factory=dict)
    instances: list[MinedInstance] = field(default_factory=list)


@dataclass
class CurriculumState:
    folds: list[list[str]]
    k: int = 0
    instances: dict[str, list[MinedInstance]] = field(default_factory=dict)
    logs: list[IterationLog] = field(default_factory=list)
    final_corloc: float | None = None

    @property
    def K(self) -> int:
        return len(self.folds)

    def images_up_to(self, k: int) -> list[str]:
        """Image ids of folds 1..k (1-based, clamped to K), in fold order."""
        return [i for fold in self.folds[: min(k, self.K)] for i in fold]

    def fold_of(self) -> dict[str, int]:
        return {i: n + 1 for n, fold in enumerate(self.folds) for i in fold}


@dataclass
class ZigzagRun:
    state: CurriculumState
    snapshots: list[DetectorAdapter]


def partition_folds(reports: Sequence[DifficultyReport], K: int) -> CurriculumState:
    """Split images into K near-equal folds from easiest (highest mEAS) to hardest.

    Equal difficulties are ordered by image id. When the image count does not
    divide evenly, the earlier folds take one extra image each.
    """
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    if K > len(reports):
        raise ValidationError(f"K={K} exceeds the {len(reports)} available images")
    ranked = sorted(reports, key=lambda r: (-r.difficulty, r.image_id))
    base, extra = divmod(len(ranked), K)
    folds, start = [], 0
    for i in range(K):
        size = base + (1 if i < extra else 0)
        folds.append([r.image_id for r in ranked[start:start + size]])
        start += size
    return CurriculumState(folds)


def weighted_loss(confidence: float, new_score: float) -> float:
    """Relocalization loss of one mined region, weighted by the previous model's confidence."""
    return float(-confidence * math.log(min(max(new_score, LOG_EPS), 1.0)))


def build_samples(
    rec: ImageRecord, instances: Sequence[MinedInstance], weighted: bool = True
) -> tuple[WeightedSample, ...]:
    """Positives carry their instance's confidence as weight; hard negatives weigh 1."""
    out = []
    for lab in label_proposals(rec, instances):
        if lab.role is Role.IGNORED:
            continue
        box = rec.proposals[lab.proposal_index]
        if lab.role is Role.POSITIVE:
            w = instances[lab.instance_index].confidence if weighted else 1.0
            out.append(WeightedSample(lab.proposal_index, box, lab.class_index, lab.role, w))
        else:
            out.append(WeightedSample(lab.proposal_index, box, None, lab.role, 1.0))
    return tuple(out)


def relocalize(adapter: DetectorAdapter, rec: ImageRecord) -> list[MinedInstance]:
    """Top-scoring proposal for each positive class; ties go to the lower index."""
    scores = adapter.score(rec)
    if scores.values.shape != (rec.class_count, len(rec.proposals)):
        raise AdapterError(
            f"{rec.image_id}: adapter returned shape {scores.values.shape}, expected "
            f"{(rec.class_count, len(rec.proposals))}"
        )
    out = []
    for c in rec.positive_classes:
        row = scores.values[c]
        j = int(np.argmax(row))  # first maximum
        conf = float(min(max(row[j], 0.0), 1.0))
        out.append(MinedInstance(rec.image_id, c, rec.proposals[j], conf))
    return out


def ensemble_scores(snapshots: Sequence[DetectorAdapter], rec: ImageRecord) -> ScoreMatrix:
    """Element-wise mean of the snapshots' detection scores."""
    if not snapshots:
        raise ValidationError("ensemble needs at least one snapshot")
    mats = [s.score(rec).values for s in snapshots]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise ValidationError(f"snapshot score shapes differ: {[m.shape for m in mats]}")
    return ScoreMatrix(np.mean(mats, axis=0), ScoreKind.DETECTION)


def _corloc_of(
    ids: Sequence[str],
    instances: Mapping[str, Sequence[MinedInstance]],
    gts: Mapping[str, GroundTruth],
) -> float:
    preds = {(i, m.class_index): m.box for i in ids for m in instances.get(i, ())}
    sub = {i: gts[i] for i in ids if i in gts}
    return corloc(preds, sub).mean


def run_zigzag(
    dataset: ZigzagDataset,
    adapter_factory: Callable[[], DetectorAdapter],
    K: int,
    tau: float,
    seed: int,
    *,
    weighted: bool = True,
    stride: int = FEATURE_STRIDE,
) -> ZigzagRun:
    """Run the full difficulty-ordered train / relocalize loop.

    Returns the final state (folds, instances, per-iteration logs) and one
    model snapshot per fold.
    """
    state = partition_folds(list(dataset.reports.values()), K)
    state.instances = {i: list(v) for i, v in dataset.instances.items()}
    gts = dataset.ground_truth
    fold_of = state.fold_of()
    ss = np.random.SeedSequence(seed)
    phase_seeds = ss.spawn(K)
    adapter = adapter_factory()
    snapshots: list[DetectorAdapter] = []

    if gts is not None:
        initial = IterationLog(0)
        for f in range(1, K + 1):
            initial.corloc_by_fold[f] = _corloc_of(state.folds[f - 1], state.instances, gts)
        initial.corloc = _corloc_of(state.images_up_to(K), state.instances, gts)
        state.logs.append(initial)

    for k in range(1, K + 1):
        state.k = k
        entry = IterationLog(k)
        rng = np.random.default_rng(phase_seeds[k - 1])
        train_ids = [i for i in state.images_up_to(k) if state.instances.get(i)]
        base = []
        for i in train_ids:
            rec = dataset.records[i]
            samples = build_samples(rec, state.instances[i], weighted)
            if samples:
                base.append((rec, samples, state.instances[i]))
        entry.trained_images = len(base)
        if not base:
            log.warning("iteration %d: no trainable images in folds 1..%d, skipping training", k, k)
        else:
            for _ in range(adapter.steps_per_phase):
                batch = [
                    TrainingExample(
                        rec,
                        samples,
                        tuple(
                            plan_mask(
                                m.box, tau, rng, stride=stride,
                                image_id=rec.image_id, class_index=m.class_index,
                            )
                            for m in insts
                        ) if tau > 0 else (),
                    )
                    for rec, samples, insts in base
                ]
                loss = adapter.train_step(batch)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"iteration {k}: non-finite training loss {loss}")
                entry.losses.append(float(loss))
        snapshots.append(adapter.snapshot())

        target = state.images_up_to(k + 1)
        for i in target:
            try:
                state.instances[i] = relocalize(adapter, dataset.records[i])
            except (AdapterError, ValidationError, KeyError) as exc:
                log.warning("iteration %d: relocalization skipped %s: %s", k, i, exc)
                entry.skipped_images.append(i)
        entry.relocalized_images = len(target) - len(entry.skipped_images)
        entry.instances = [m for i in target for m in state.instances.get(i, ())]
        if gts is not None:
            for f in sorted({fold_of[i] for i in target}):
                entry.corloc_by_fold[f] = _corloc_of(state.folds[f - 1], state.instances, gts)
            entry.corloc = _corloc_of(target, state.instances, gts)
        state.logs.append(entry)

    if gts is not None:
        state.final_corloc = _corloc_of(state.images_up_to(K), state.instances, gts)
    return ZigzagRun(state, snapshots)
