"""Synthetic scenes with planted objects, two-stream region scores and feature grids.

Each scene exposes the localization failure modes a weakly supervised
detector runs into: score mass drifting onto a discriminative part, several
same-class objects voting for a box that groups them, and clutter that steals
evidence. Four knobs control them: ``signal_strength``, ``part_focus``,
``co_instance`` and ``clutter``.

Feature channels, for C classes: ``2c`` is the body response of class c,
``2c + 1`` its part response, and the last channel responds to clutter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import RegionPooler
from .core import BBox, ImageRecord, ScoreKind, ScoreMatrix, ValidationError, iou
from .evaluation import GroundTruth, GTObject
from .masking import FEATURE_STRIDE, FeatureGrid
from .scoring import normalize_two_stream

_MIN_SIDE = 4.0
DISTRACTOR_LEVEL = 0.6


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_id: str
    planted: tuple[tuple[int, BBox], ...]
    width: int = 320
    height: int = 320
    class_count: int = 3
    clutter: int = 10
    signal_strength: float = 0.8
    co_instance: int = 1
    part_focus: float = 0.0
    seed: int = 0
    stride: int = FEATURE_STRIDE
    feature_noise: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "planted", tuple((int(c), b) for c, b in self.planted))


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    record: ImageRecord
    cls_stream: ScoreMatrix
    det_stream: ScoreMatrix
    scores: ScoreMatrix
    ground_truth: GroundTruth
    features: FeatureGrid
    parts: list[BBox] = field(default_factory=list)


def _validate(spec: SyntheticSceneSpec) -> None:
    if not spec.planted:
        raise ValidationError(f"{spec.image_id}: at least one planted object is required")
    for c, box in spec.planted:
        if not 0 <= c < spec.class_count:
            raise ValidationError(f"{spec.image_id}: class {c} outside 0..{spec.class_count - 1}")
        if not box.inside_image(spec.width, spec.height):
            raise ValidationError(
                f"{spec.image_id}: planted box {box.to_list()} outside "
                f"{spec.width}x{spec.height}"
            )
        if box.width < _MIN_SIDE or box.height < _MIN_SIDE:
            raise ValidationError(f"{spec.image_id}: planted box {box.to_list()} too small")
    if not 0.0 <= spec.signal_strength <= 1.0:
        raise ValidationError("signal_strength must lie in [0, 1]")
    if not 0.0 <= spec.part_focus <= 1.0:
        raise ValidationError("part_focus must lie in [0, 1]")
    if spec.co_instance < 1 or spec.clutter < 0:
        raise ValidationError("co_instance must be >= 1 and clutter >= 0")


def _clip_round(x0, y0, x1, y1, width, height) -> BBox | None:
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    x0, y0 = max(0, round(x0)), max(0, round(y0))
    x1, y1 = min(width, round(x1)), min(height, round(y1))
    if x1 - x0 < _MIN_SIDE or y1 - y0 < _MIN_SIDE:
        return None
    return BBox(float(x0), float(y0), float(x1), float(y1))


def _jitter(rng, box: BBox, sigma: float, width, height) -> BBox | None:
    w, h = box.width, box.height
    d = rng.normal(0.0, sigma, size=4) * np.array([w, h, w, h])
    return _clip_round(
        box.x_min + d[0], box.y_min + d[1], box.x_max + d[2], box.y_max + d[3], width, height
    )


def _place_copies(rng, spec: SyntheticSceneSpec) -> list[tuple[int, BBox]]:
    objects = list(spec.planted)
    for c, box in spec.planted:
        for _ in range(spec.co_instance - 1):
            for _attempt in range(500):
                x0 = rng.uniform(0, spec.width - box.width)
                y0 = rng.uniform(0, spec.height - box.height)
                cand = BBox(
                    float(round(x0)), float(round(y0)),
                    float(round(x0) + box.width), float(round(y0) + box.height),
                )
                if cand.inside_image(spec.width, spec.height) and all(
                    iou(cand, o) == 0.0 for _, o in objects
                ):
                    objects.append((c, cand))
                    break
            else:
                raise ValidationError(
                    f"{spec.image_id}: no room for {spec.co_instance} copies of {box.to_list()}"
                )
    return objects


def _part_of(rng, box: BBox) -> BBox:
    pw = box.width * rng.uniform(0.38, 0.5)
    ph = box.height * rng.uniform(0.38, 0.5)
    x0 = box.x_min + rng.uniform(0, box.width - pw)
    y0 = box.y_min + rng.uniform(0, box.height - ph)
    return BBox(float(round(x0)), float(round(y0)), float(round(x0 + pw)), float(round(y0 + ph)))


def generate_synthetic(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Build one deterministic scene from ``spec``."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    W, H = spec.width, spec.height
    objects = _place_copies(rng, spec)
    parts = [_part_of(rng, box) for _, box in objects]

    # proposals, tagged: ("whole", i) / ("part", i) / ("group", (i, j)) / ("clutter", None)
    proposals: list[tuple[BBox, tuple]] = []
    for i, (_, box) in enumerate(objects):
        proposals.append((box, ("whole", i)))
        for _ in range(12):
            b = _jitter(rng, box, 0.12, W, H)
            if b is not None:
                proposals.append((b, ("whole", i)))
        for _ in range(4):
            b = _jitter(rng, parts[i], 0.1, W, H)
            if b is not None:
                proposals.append((b, ("part", i)))
        for _ in range(3):
            # larger sub-boxes anchored on the part: half-covering the object
            grow = rng.uniform(1.2, 1.6)
            cx = (parts[i].x_min + parts[i].x_max) / 2
            cy = (parts[i].y_min + parts[i].y_max) / 2
            hw, hh = parts[i].width * grow / 2, parts[i].height * grow / 2
            b = _clip_round(
                max(cx - hw, box.x_min), max(cy - hh, box.y_min),
                min(cx + hw, box.x_max), min(cy + hh, box.y_max), W, H,
            )
            if b is not None:
                proposals.append((b, ("part", i)))
    groups = [
        (i, j) for i, j in itertools.combinations(range(len(objects)), 2)
        if objects[i][0] == objects[j][0]
    ]
    for i, j in groups:
        a, b = objects[i][1], objects[j][1]
        union = BBox(
            min(a.x_min, b.x_min), min(a.y_min, b.y_min),
            max(a.x_max, b.x_max), max(a.y_max, b.y_max),
        )
        proposals.append((union, ("group", (i, j))))
        for _ in range(2):
            g = _jitter(rng, union, 0.05, W, H)
            if g is not None:
                proposals.append((g, ("group", (i, j))))
    for _ in range(spec.clutter):
        bw = rng.uniform(0.12, 0.45) * W
        bh = rng.uniform(0.12, 0.45) * H
        x0 = rng.uniform(0, W - bw)
        y0 = rng.uniform(0, H - bh)
        b = _clip_round(x0, y0, x0 + bw, y0 + bh, W, H)
        if b is not None:
            proposals.append((b, ("clutter", None)))
    order = rng.permutation(len(proposals))
    proposals = [proposals[k] for k in order]
    boxes = [p[0] for p in proposals]
    tags = [p[1] for p in proposals]
    R = len(boxes)
    present = sorted({c for c, _ in objects})
    labels = [1 if c in present else -1 for c in range(spec.class_count)]
    record = ImageRecord(spec.image_id, W, H, boxes, labels)

    s = spec.signal_strength
    kappa = 4.0 + 26.0 * s
    groups_merge = bool(rng.random() < 0.5)
    det = np.zeros((spec.class_count, R))
    cls = np.zeros((spec.class_count, R))
    for c in range(spec.class_count):
        if c not in present:
            det[c] = rng.normal(0.0, 0.5, size=R)
            cls[c] = -1.5
            continue
        mass = np.zeros(R)
        members = [i for i, (oc, _) in enumerate(objects) if oc == c]
        shares = rng.uniform(0.8, 1.2, size=len(members))
        shares /= shares.sum()
        clutter_idx = [r for r, t in enumerate(tags) if t[0] == "clutter"]
        object_mass = s if clutter_idx else 1.0
        for share, i in zip(shares, members):
            obj_box, part_box = objects[i][1], parts[i]
            whole = np.zeros(R)
            part = np.zeros(R)
            for r, (b, t) in enumerate(zip(boxes, tags)):
                if t == ("whole", i):
                    whole[r] = math.exp(kappa * (iou(b, obj_box) - 1.0))
                elif t == ("part", i):
                    part[r] = math.exp(6.0 * (iou(b, part_box) - 1.0))
                elif t[0] == "group" and i in t[1]:
                    pseudo = 1.0 if groups_merge else 0.7
                    whole[r] = math.exp(kappa * (pseudo - 1.0)) / 2
            dist = (1 - spec.part_focus) * whole / whole.sum()
            if part.sum() > 0:
                dist += spec.part_focus * part / part.sum()
            else:
                dist = whole / whole.sum()
            mass += object_mass * share * dist
        if clutter_idx:
            w = rng.lognormal(0.0, 1.0, size=len(clutter_idx))
            mass[clutter_idx] += (1.0 - object_mass) * w / w.sum()
        det[c] = np.log(np.maximum(mass, 1e-20))
        for r, (b, t) in enumerate(zip(boxes, tags)):
            if t[0] in ("whole", "part") and objects[t[1]][0] == c:
                cls[c, r] = 1.0 + 3.0 * s
            elif t[0] == "group" and objects[t[1][0]][0] == c:
                cls[c, r] = 1.0 + 3.0 * s
    cls_stream = ScoreMatrix(cls, ScoreKind.RAW_CLS_STREAM)
    det_stream = ScoreMatrix(det, ScoreKind.RAW_DET_STREAM)
    scores = normalize_two_stream(cls_stream, det_stream)

    features = _feature_grid(rng, spec, objects, parts, boxes, tags)
    gt = GroundTruth(spec.image_id, tuple(GTObject(c, b) for c, b in objects))
    return SyntheticScene(spec, record, cls_stream, det_stream, scores, gt, features, parts)


def _feature_grid(rng, spec, objects, parts, boxes, tags) -> FeatureGrid:
    grid = FeatureGrid.zeros(2 * spec.class_count + 1, spec.width, spec.height, spec.stride)
    pooler = RegionPooler(spec.width, spec.height, (grid.height_f, grid.width_f), spec.stride)
    s = spec.signal_strength
    body_amp = 0.3 + 0.7 * s
    v = grid.values
    for (c, box), part in zip(objects, parts):
        v[2 * c] += body_amp * pooler.coverage(box)
        v[2 * c + 1] += 1.0 * pooler.coverage(part)
    clutter = [b for b, t in zip(boxes, tags) if t[0] == "clutter"]
    for k, b in enumerate(clutter):
        v[-1] += 0.8 * pooler.coverage(b)
        if k % 3 == 0:
            # distractor: object-like body response of a random class, at a fixed level
            d = int(rng.integers(spec.class_count))
            v[2 * d] += DISTRACTOR_LEVEL * pooler.coverage(b)
    v += rng.normal(0.0, spec.feature_noise, size=v.shape)
    return grid


# --- benchmark suite -------------------------------------------------------

BENCHMARK_SIZE = 200
BENCHMARK_SEED = 20171
BENCHMARK_GRID = {
    "signal_strength": (0.95, 0.75, 0.55, 0.35),
    "part_focus": (0.0, 0.75),
    "co_instance": (1, 2),
    "clutter": (6, 24),
}


def benchmark_specs(
    n: int = BENCHMARK_SIZE, master_seed: int = BENCHMARK_SEED, class_count: int = 3
) -> list[SyntheticSceneSpec]:
    """The fixed benchmark: ``n`` scenes cycling through the 4-knob grid."""
    rng = np.random.default_rng(master_seed)
    combos = list(itertools.product(*BENCHMARK_GRID.values()))
    specs = []
    for k in range(n):
        signal, focus, co, clutter = combos[k % len(combos)]
        W = H = 320
        c = int(rng.integers(class_count))
        scale = 0.35 if co > 1 else rng.uniform(0.3, 0.6)
        bw = scale * W * rng.uniform(0.8, 1.2)
        bh = scale * H * rng.uniform(0.8, 1.2)
        # leave the right half free for same-class copies
        x0 = rng.uniform(0, (W / 2 if co > 1 else W) - bw)
        y0 = rng.uniform(0, H - bh)
        box = BBox(float(round(x0)), float(round(y0)), float(round(x0 + bw)), float(round(y0 + bh)))
        specs.append(
            SyntheticSceneSpec(
                image_id=f"syn{k:04d}",
                planted=((c, box),),
                width=W,
                height=H,
                class_count=class_count,
                clutter=clutter,
                signal_strength=signal,
                co_instance=co,
                part_focus=focus,
                seed=int(rng.integers(2**31)),
            )
        )
    return specs


def generate_benchmark(
    n: int = BENCHMARK_SIZE, master_seed: int = BENCHMARK_SEED, class_count: int = 3
) -> list[SyntheticScene]:
    return [generate_synthetic(s) for s in benchmark_specs(n, master_seed, class_count)]
