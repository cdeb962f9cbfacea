"""File formats: VOC XML annotations, JSON-lines records, dataset and run manifests.

All writers are deterministic: fields are emitted in a fixed order and floats
are rounded to 9 significant digits.
"""

from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .core import BBox, ImageRecord, MinedInstance, ScoreKind, ScoreMatrix, ValidationError
from .difficulty import DifficultyReport
from .evaluation import Detection, GroundTruth, GTObject
from .masking import FeatureGrid, MaskPlan
from .scoring import normalize_two_stream


def fmt_float(x: float) -> float:
    return float(f"{float(x):.9g}")


def _clean(obj: Any) -> Any:
    if isinstance(obj, (bool, str)) or obj is None:
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), ensure_ascii=False, allow_nan=True)


def write_jsonl(path: Path | str, rows: Iterable[Mapping]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
            n += 1
    return n


def write_json(path: Path | str, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_clean(obj), indent=2, ensure_ascii=False) + "\n")


def iter_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    """Stream (line number, record) pairs; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def _require(rec: dict, key: str, types, where: str):
    if key not in rec:
        raise ValidationError(f"{where}: missing field {key!r}")
    value = rec[key]
    allowed = types if isinstance(types, tuple) else (types,)
    # bool is an int subclass; JSON true must not pass as a number
    if not isinstance(value, allowed) or (isinstance(value, bool) and bool not in allowed):
        raise ValidationError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _box(value, where: str) -> BBox:
    if (
        not isinstance(value, list)
        or len(value) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    ):
        raise ValidationError(f"{where}: a box must be a list of 4 numbers, got {value!r}")
    return BBox(*value)


# --- VOC annotations --------------------------------------------------------


@dataclass(frozen=True)
class VocAnnotation:
    image_id: str
    width: int
    height: int
    ground_truth: GroundTruth
    labels: tuple[int, ...]
    filename: str = ""


def _text(node: ET.Element, tag: str, path) -> str:
    child = node.find(tag)
    if child is None or child.text is None:
        raise ValidationError(f"{path}: <{node.tag}> lacks <{tag}>")
    return child.text.strip()


def _number(node: ET.Element, tag: str, path) -> float:
    raw = _text(node, tag, path)
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"{path}: <{tag}> is not a number: {raw!r}") from None


def load_voc_annotation(path: Path | str, class_names: Sequence[str]) -> VocAnnotation:
    """Parse one VOC XML file; image-level labels are +1 for every class with a box."""
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        line, col = exc.position
        raise ValidationError(f"{path}:{line}:{col}: malformed XML") from None
    if root.tag != "annotation":
        raise ValidationError(f"{path}: root element is <{root.tag}>, expected <annotation>")
    size = root.find("size")
    if size is None:
        raise ValidationError(f"{path}: missing <size>")
    width, height = int(_number(size, "width", path)), int(_number(size, "height", path))
    index = {name: i for i, name in enumerate(class_names)}
    objects = []
    for obj in root.findall("object"):
        name = _text(obj, "name", path)
        if name not in index:
            raise ValidationError(f"{path}: unknown class name {name!r}")
        difficult = obj.find("difficult")
        flag = difficult is not None and (difficult.text or "0").strip() == "1"
        bb = obj.find("bndbox")
        if bb is None:
            raise ValidationError(f"{path}: object {name!r} lacks <bndbox>")
        box = BBox(*(_number(bb, t, path) for t in ("xmin", "ymin", "xmax", "ymax")))
        objects.append(GTObject(index[name], box, flag))
    filename_node = root.find("filename")
    filename = (filename_node.text or "").strip() if filename_node is not None else ""
    image_id = Path(filename).stem if filename else path.stem
    present = {o.class_index for o in objects}
    labels = tuple(1 if c in present else -1 for c in range(len(class_names)))
    return VocAnnotation(image_id, width, height, GroundTruth(image_id, objects), labels, filename)


def _fmt_coord(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(fmt_float(x))


def write_voc_annotation(path: Path | str, ann: VocAnnotation, class_names: Sequence[str]) -> None:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = ann.filename or f"{ann.image_id}.jpg"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "3"
    for o in ann.ground_truth.objects:
        node = ET.SubElement(root, "object")
        ET.SubElement(node, "name").text = class_names[o.class_index]
        ET.SubElement(node, "difficult").text = "1" if o.difficult else "0"
        bb = ET.SubElement(node, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), o.box.to_list()):
            ET.SubElement(bb, tag).text = _fmt_coord(v)
    ET.indent(root)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


# --- score dumps ------------------------------------------------------------


def score_record(image_id: str, scores: ScoreMatrix) -> dict:
    return {
        "image_id": image_id,
        "kind": scores.kind.value,
        "shape": list(scores.values.shape),
        "values": scores.values.ravel().tolist(),
    }


def parse_score_record(rec: dict, where: str = "record") -> tuple[str, ScoreMatrix]:
    image_id = _require(rec, "image_id", str, where)
    kind = _require(rec, "kind", str, where)
    shape = _require(rec, "shape", list, where)
    values = _require(rec, "values", list, where)
    try:
        kind = ScoreKind(kind)
    except ValueError:
        raise ValidationError(f"{where}: unknown score kind {kind!r}") from None
    if len(shape) != 2 or not all(isinstance(v, int) and v >= 0 for v in shape):
        raise ValidationError(f"{where}: shape must be [C, R], got {shape}")
    if len(values) != shape[0] * shape[1]:
        raise ValidationError(f"{where}: {len(values)} values for shape {shape}")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise ValidationError(f"{where}: values must be numbers")
    try:
        matrix = ScoreMatrix(np.array(values, dtype=np.float64).reshape(shape), kind)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    return image_id, matrix


def iter_score_dump(
    path: Path | str, proposal_counts: Mapping[str, int] | None = None
) -> Iterator[tuple[str, ScoreMatrix]]:
    """Stream (image_id, ScoreMatrix) pairs from a score-dump JSONL file.

    With ``proposal_counts``, each record's region count is checked against
    its image's proposal count.
    """
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        image_id, matrix = parse_score_record(rec, where)
        if proposal_counts is not None:
            expected = proposal_counts.get(image_id)
            if expected is None:
                raise ValidationError(f"{where}: unknown image {image_id!r}")
            if matrix.region_count != expected:
                raise ValidationError(
                    f"{where}: {matrix.region_count} regions but {image_id!r} has "
                    f"{expected} proposals"
                )
        yield image_id, matrix


def load_score_dump(
    path: Path | str, proposal_counts: Mapping[str, int] | None = None
) -> dict[str, ScoreMatrix]:
    """Normalized score matrix per image.

    A record of kind ``normalized`` (or ``detection``) is taken as-is; an
    image given as a ``raw_cls_stream`` + ``raw_det_stream`` pair is
    normalized here.
    """
    direct: dict[str, ScoreMatrix] = {}
    raw: dict[str, dict[ScoreKind, ScoreMatrix]] = {}
    for image_id, m in iter_score_dump(path, proposal_counts):
        if m.kind in (ScoreKind.NORMALIZED, ScoreKind.DETECTION):
            direct[image_id] = m
        else:
            raw.setdefault(image_id, {})[m.kind] = m
    for image_id, streams in raw.items():
        if image_id in direct:
            continue
        if len(streams) != 2:
            raise ValidationError(f"{path}: {image_id!r} has only one raw stream")
        direct[image_id] = normalize_two_stream(
            streams[ScoreKind.RAW_CLS_STREAM], streams[ScoreKind.RAW_DET_STREAM]
        )
    return direct


# --- proposals --------------------------------------------------------------


def proposal_record(rec: ImageRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "width": rec.width,
        "height": rec.height,
        "boxes": [b.to_list() for b in rec.proposals],
    }


def iter_proposals(path: Path | str) -> Iterator[tuple[str, list[BBox]]]:
    for lineno, rec in iter_jsonl(path):
        where = f"{path}:{lineno}"
        image_id = _require(rec, "image_id", str, where)
        boxes = _require(rec, "boxes", list, where)
        try:
            yield image_id, [_box(b, where) for b in boxes]
        except ValidationError as exc:
            raise ValidationError(f"{where}: bad box: {exc}") from None


# --- instances, detections, reports, folds -----------------------------------


def instance_record(m: MinedInstance) -> dict:
    return {
        "image_id": m.image_id,
        "class": m.class_index,
        "box": m.box.to_list(),
        "confidence": m.confidence,
    }


def parse_instance(rec: dict, where: str = "record") -> MinedInstance:
    image_id = _require(rec, "image_id", str, where)
    c = _require(rec, "class", int, where)
    box = _require(rec, "box", list, where)
    conf = _require(rec, "confidence", (int, float), where)
    try:
        return MinedInstance(image_id, c, _box(box, where), float(conf))
    except (TypeError, ValidationError) as exc:
        raise ValidationError(f"{where}: {exc}") from None


def load_instances(path: Path | str) -> list[MinedInstance]:
    return [parse_instance(rec, f"{path}:{n}") for n, rec in iter_jsonl(path)]


def detection_record(d: Detection) -> dict:
    return {"image_id": d.image_id, "class": d.class_index, "box": d.box.to_list(), "score": d.score}


def load_detections(path: Path | str) -> list[Detection]:
    out = []
    for n, rec in iter_jsonl(path):
        where = f"{path}:{n}"
        image_id = _require(rec, "image_id", str, where)
        c = _require(rec, "class", int, where)
        box = _require(rec, "box", list, where)
        score = _require(rec, "score", (int, float), where)
        try:
            out.append(Detection(image_id, c, _box(box, where), float(score)))
        except (TypeError, ValidationError) as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return out


def report_record(r: DifficultyReport) -> dict:
    return {
        "image_id": r.image_id,
        "classes": [{"class": c, "meas": r.meas[c]} for c in sorted(r.meas)],
        "difficulty": r.difficulty,
    }


def load_reports(path: Path | str) -> list[DifficultyReport]:
    out = []
    for n, rec in iter_jsonl(path):
        where = f"{path}:{n}"
        image_id = _require(rec, "image_id", str, where)
        classes = _require(rec, "classes", list, where)
        try:
            meas = {int(e["class"]): float(e["meas"]) for e in classes}
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"{where}: malformed class entries") from None
        out.append(DifficultyReport(image_id, meas))
    return out


def folds_record(folds: Sequence[Sequence[str]]) -> dict:
    return {"k": len(folds), "folds": [list(f) for f in folds]}


def load_folds(path: Path | str) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    folds = _require(rec, "folds", list, str(path))
    if rec.get("k") != len(folds):
        raise ValidationError(f"{path}: k={rec.get('k')} but {len(folds)} folds listed")
    return [list(f) for f in folds]


def mask_plan_record(p: MaskPlan) -> dict:
    return {
        "image_id": p.image_id,
        "class": p.class_index,
        "omega": None if p.omega is None else p.omega.to_list(),
        "cells": sorted([list(c) for c in p.mapped_cells]),
    }


def write_csv(path: Path | str | IO, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    def cell(v):
        return f"{v:.9g}" if isinstance(v, (float, np.floating)) else v

    fh = open(path, "w", newline="", encoding="utf-8") if isinstance(path, (str, Path)) else path
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([cell(v) for v in row])
    finally:
        if isinstance(path, (str, Path)):
            fh.close()


# --- dataset manifest ---------------------------------------------------------


@dataclass
class ManifestEntry:
    image_id: str
    annotation: str
    proposals: str
    scores: str | None = None
    split: str = "trainval"


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    images: list[ManifestEntry]
    root: Path = field(default_factory=Path)
    features: str | None = None

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def to_record(self) -> dict:
        out = {
            "name": self.name,
            "classes": list(self.classes),
            "images": [
                {
                    "image_id": e.image_id,
                    "annotation": e.annotation,
                    "proposals": e.proposals,
                    "scores": e.scores,
                    "split": e.split,
                }
                for e in self.images
            ],
        }
        if self.features is not None:
            out["features"] = self.features
        return out


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: malformed JSON: {exc.msg}") from None
    where = str(path)
    classes = _require(rec, "classes", list, where)
    if not classes or not all(isinstance(c, str) for c in classes):
        raise ValidationError(f"{where}: class list must be a non-empty list of names")
    if len(set(classes)) != len(classes):
        raise ValidationError(f"{where}: duplicate class names")
    images = []
    for k, e in enumerate(_require(rec, "images", list, where)):
        w = f"{where}: images[{k}]"
        images.append(
            ManifestEntry(
                image_id=_require(e, "image_id", str, w),
                annotation=_require(e, "annotation", str, w),
                proposals=_require(e, "proposals", str, w),
                scores=e.get("scores"),
                split=e.get("split", "trainval"),
            )
        )
    manifest = DatasetManifest(
        rec.get("name", path.stem), classes, images, path.parent.resolve(), rec.get("features")
    )
    for e in images:
        for rel in (e.annotation, e.proposals, e.scores):
            if rel is not None and not manifest.resolve(rel).exists():
                raise ValidationError(f"{where}: {e.image_id}: missing file {rel}")
    return manifest


@dataclass
class LoadedDataset:
    manifest: DatasetManifest
    records: dict[str, ImageRecord]
    ground_truth: dict[str, GroundTruth]
    scores: dict[str, ScoreMatrix]
    features: dict[str, FeatureGrid] | None = None


def load_dataset(
    manifest: DatasetManifest, split: str | None = "trainval", with_scores: bool = True
) -> LoadedDataset:
    entries = [e for e in manifest.images if split is None or e.split == split]
    wanted = {e.image_id for e in entries}
    anns = {}
    for e in entries:
        ann = load_voc_annotation(manifest.resolve(e.annotation), manifest.classes)
        if ann.image_id != e.image_id:
            ann = VocAnnotation(
                e.image_id, ann.width, ann.height,
                GroundTruth(e.image_id, ann.ground_truth.objects), ann.labels, ann.filename,
            )
        anns[e.image_id] = ann
    boxes: dict[str, list[BBox]] = {}
    for p in sorted({e.proposals for e in entries}):
        for image_id, bxs in iter_proposals(manifest.resolve(p)):
            if image_id in wanted:
                boxes[image_id] = bxs
    records = {}
    for e in entries:
        if e.image_id not in boxes:
            raise ValidationError(f"no proposals listed for {e.image_id!r}")
        ann = anns[e.image_id]
        records[e.image_id] = ImageRecord(
            e.image_id, ann.width, ann.height, boxes[e.image_id], ann.labels
        )
    scores: dict[str, ScoreMatrix] = {}
    if with_scores:
        counts = {i: len(r.proposals) for i, r in records.items()}
        for p in sorted({e.scores for e in entries if e.scores}):
            for image_id, m in load_score_dump(manifest.resolve(p)).items():
                if image_id not in wanted:
                    continue
                if m.region_count != counts[image_id]:
                    raise ValidationError(
                        f"{p}: {m.region_count} regions but {image_id!r} has "
                        f"{counts[image_id]} proposals"
                    )
                if m.class_count != len(manifest.classes):
                    raise ValidationError(
                        f"{p}: {image_id!r} has {m.class_count} classes, manifest lists "
                        f"{len(manifest.classes)}"
                    )
                scores[image_id] = m
    features = None
    if manifest.features:
        features = load_features(manifest.resolve(manifest.features))
    gts = {i: a.ground_truth for i, a in anns.items()}
    return LoadedDataset(manifest, records, gts, scores, features)


def save_features(path: Path | str, grids: Mapping[str, FeatureGrid]) -> None:
    arrays = {f"{k}": g.values for k, g in grids.items()}
    strides = np.array([grids[k].stride for k in arrays], dtype=np.int64)
    np.savez_compressed(path, __ids__=np.array(list(arrays)), __strides__=strides, **arrays)


def load_features(path: Path | str) -> dict[str, FeatureGrid]:
    with np.load(path, allow_pickle=False) as data:
        ids = [str(i) for i in data["__ids__"]]
        strides = data["__strides__"]
        return {i: FeatureGrid(data[i], int(s)) for i, s in zip(ids, strides)}
