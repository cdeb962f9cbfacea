"""Glue between per-image scoring, difficulty, mining and the zigzag loop."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

from .adapters import SyntheticAdapter
from .core import ImageRecord, ScoreMatrix
from .curriculum import ZigzagDataset, ZigzagRun, run_zigzag
from .difficulty import difficulty_report
from .evaluation import GroundTruth
from .mining import MiningFailure, mine_all
from .synthetic import SyntheticScene, generate_benchmark

log = logging.getLogger(__name__)


def prepare_dataset(
    class_names: Sequence[str],
    records: Mapping[str, ImageRecord],
    scores: Mapping[str, ScoreMatrix],
    ground_truth: Mapping[str, GroundTruth] | None = None,
    failures: list[MiningFailure] | None = None,
) -> ZigzagDataset:
    """Difficulty reports and initial mined instances for every scored image.

    Images without a positive class or without any minable class are left
    out of the reports (and so of the folds).
    """
    reports, instances = {}, {}
    for image_id in sorted(records):
        rec = records[image_id]
        if image_id not in scores or not rec.positive_classes:
            continue
        report = difficulty_report(rec, scores[image_id])
        if not report.meas:
            log.warning("%s: no class with positive evidence, dropped", image_id)
            continue
        reports[image_id] = report
        instances[image_id] = mine_all(rec, scores[image_id], failures=failures)
    return ZigzagDataset(
        list(class_names), dict(records), reports, instances,
        dict(ground_truth) if ground_truth is not None else None,
    )


def dataset_from_scenes(scenes: Sequence[SyntheticScene]) -> ZigzagDataset:
    class_count = scenes[0].spec.class_count
    return prepare_dataset(
        [f"class{c}" for c in range(class_count)],
        {s.record.image_id: s.record for s in scenes},
        {s.record.image_id: s.scores for s in scenes},
        {s.record.image_id: s.ground_truth for s in scenes},
    )


def synthetic_factory(dataset: ZigzagDataset, features, **adapter_kwargs):
    """Adapter factory over ``features``; feature caches are built once and shared."""
    template = SyntheticAdapter(
        features, dataset.records, len(dataset.class_names), **adapter_kwargs
    )
    return template.snapshot


def run_benchmark(
    K: int,
    tau: float,
    seed: int = 0,
    *,
    scenes: Sequence[SyntheticScene] | None = None,
    weighted: bool = True,
    **adapter_kwargs,
) -> ZigzagRun:
    scenes = scenes if scenes is not None else generate_benchmark()
    dataset = dataset_from_scenes(scenes)
    features = {s.record.image_id: s.features for s in scenes}
    factory = synthetic_factory(dataset, features, **adapter_kwargs)
    return run_zigzag(dataset, factory, K, tau, seed, weighted=weighted)
