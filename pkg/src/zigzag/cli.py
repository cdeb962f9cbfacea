"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .core import ValidationError
from .adapters import FileAdapter, SyntheticAdapter
from .curriculum import ZigzagDataset, ZigzagRun, partition_folds, run_zigzag
from .evaluation import categorize_errors, corloc, mean_average_precision
from .mining import MiningFailure, mine_all
from .pipeline import dataset_from_scenes, prepare_dataset
from .serialization import (
    DatasetManifest,
    LoadedDataset,
    ManifestEntry,
    VocAnnotation,
    dumps,
    fmt_float,
    folds_record,
    instance_record,
    load_dataset,
    load_detections,
    load_instances,
    load_manifest,
    load_reports,
    load_score_dump,
    proposal_record,
    report_record,
    save_features,
    score_record,
    write_csv,
    write_json,
    write_jsonl,
    write_voc_annotation,
)
from .synthetic import BENCHMARK_SEED, BENCHMARK_SIZE, generate_benchmark

log = logging.getLogger("zigzag")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

ADAPTER_DEFAULTS = {"steps_per_phase": 60, "learning_rate": 0.05, "l2": 1e-3, "ring": 0.3}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which means runtime failure here
        raise UsageError(f"{self.prog}: {message}")


# --- helpers -----------------------------------------------------------------


def _load(manifest_path: str, split: str | None = "trainval") -> tuple[LoadedDataset, ZigzagDataset, list]:
    loaded = load_dataset(load_manifest(manifest_path), split=split)
    failures: list[MiningFailure] = []
    dataset = prepare_dataset(
        loaded.manifest.classes, loaded.records, loaded.scores, loaded.ground_truth, failures
    )
    for f in failures:
        log.warning("mining failed for %s class %d: %s", f.image_id, f.class_index, f.reason)
    return loaded, dataset, failures


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_stream(path: str | None):
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8", newline="\n")


def _emit_jsonl(path: str | None, rows) -> None:
    if path in (None, "-"):
        for row in rows:
            sys.stdout.write(dumps(row) + "\n")
    else:
        write_jsonl(path, rows)


def run_flags(K: int, tau: float) -> list[str]:
    flags = []
    if K == 1:
        flags.append("no curriculum")
    if tau == 0:
        flags.append("no masking")
    return flags


def _adapter_factory(kind: str, loaded: LoadedDataset, dataset: ZigzagDataset, params: dict, dump_paths):
    if kind == "synthetic":
        if not loaded.features:
            raise ValidationError("the synthetic adapter needs a 'features' file in the dataset manifest")
        template = SyntheticAdapter(
            loaded.features, dataset.records, len(dataset.class_names), **params
        )
        return template.snapshot
    if not dump_paths:
        raise ValidationError("--adapter file needs --dumps, one score dump per phase")
    phases = [load_score_dump(p) for p in dump_paths]
    return lambda: FileAdapter(phases)


def _log_record(entry) -> dict:
    return {
        "iteration": entry.iteration,
        "trained_images": entry.trained_images,
        "losses": entry.losses,
        "relocalized_images": entry.relocalized_images,
        "skipped_images": entry.skipped_images,
        "corloc": entry.corloc,
        "corloc_by_fold": {str(k): v for k, v in sorted(entry.corloc_by_fold.items())},
        "instances": [instance_record(m) for m in entry.instances],
    }


# --- subcommands ---------------------------------------------------------------


def cmd_difficulty(args) -> int:
    _, dataset, _ = _load(args.manifest)
    _emit_jsonl(args.out, (report_record(dataset.reports[i]) for i in sorted(dataset.reports)))
    return EXIT_OK


def cmd_mine(args) -> int:
    loaded = load_dataset(load_manifest(args.manifest))
    failures: list[MiningFailure] = []
    rows = []
    for image_id in sorted(loaded.records):
        if image_id not in loaded.scores:
            continue
        for m in mine_all(
            loaded.records[image_id], loaded.scores[image_id],
            threshold=args.threshold, grid_step=args.grid_step, failures=failures,
        ):
            rows.append(instance_record(m))
    for f in failures:
        log.warning("mining failed for %s class %d: %s", f.image_id, f.class_index, f.reason)
    _emit_jsonl(args.out, rows)
    return EXIT_OK


def cmd_folds(args) -> int:
    if args.reports:
        reports = load_reports(args.reports)
    else:
        _, dataset, _ = _load(args.manifest)
        reports = list(dataset.reports.values())
    state = partition_folds(reports, args.k)
    rec = folds_record(state.folds)
    if args.out in (None, "-"):
        sys.stdout.write(json.dumps(rec, indent=2) + "\n")
    else:
        write_json(args.out, rec)
    return EXIT_OK


def _run_config_from_args(args) -> dict:
    if args.replay:
        with open(args.replay, encoding="utf-8") as fh:
            cfg = json.load(fh)
        for key in ("dataset", "k", "tau", "seed", "adapter"):
            if key not in cfg:
                raise ValidationError(f"{args.replay}: run manifest lacks {key!r}")
        return cfg
    if args.manifest is None:
        raise UsageError("run needs --manifest or --replay")
    if args.k is None:
        raise UsageError("run needs --k")
    params = dict(ADAPTER_DEFAULTS)
    if args.steps is not None:
        params["steps_per_phase"] = args.steps
    if args.lr is not None:
        params["learning_rate"] = args.lr
    dataset_path = Path(args.manifest).resolve()
    return {
        "dataset": str(dataset_path),
        "dataset_sha256": _sha256(dataset_path),
        "k": args.k,
        "tau": args.tau,
        "seed": args.seed,
        "weighted": not args.unweighted,
        "adapter": {
            "kind": args.adapter,
            "params": params if args.adapter == "synthetic" else {},
            "dumps": [str(Path(p).resolve()) for p in args.dumps or ()],
        },
    }


def cmd_run(args) -> int:
    cfg = _run_config_from_args(args)
    K, tau, seed = int(cfg["k"]), float(cfg["tau"]), int(cfg["seed"])
    if not 0 <= tau < 1:
        raise ValidationError(f"--tau must lie in [0, 1), got {tau}")
    dataset_path = Path(cfg["dataset"])
    if "dataset_sha256" in cfg and args.replay and _sha256(dataset_path) != cfg["dataset_sha256"]:
        raise ValidationError(f"{dataset_path} changed since the run being replayed")
    loaded, dataset, _ = _load(str(dataset_path))
    adapter = cfg["adapter"]
    factory = _adapter_factory(
        adapter["kind"], loaded, dataset, adapter.get("params", {}), adapter.get("dumps", [])
    )
    result: ZigzagRun = run_zigzag(
        dataset, factory, K, tau, seed, weighted=bool(cfg.get("weighted", True))
    )
    state = result.state

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "zigzag",
        "version": __version__,
        **{k: cfg[k] for k in ("dataset", "dataset_sha256") if k in cfg},
        "k": K,
        "tau": tau,
        "seed": seed,
        "weighted": bool(cfg.get("weighted", True)),
        "adapter": adapter,
        "flags": run_flags(K, tau),
        "folds": state.folds,
        "final_corloc": state.final_corloc,
    }
    write_json(out / "manifest.json", manifest)
    write_jsonl(out / "log.jsonl", (_log_record(e) for e in state.logs))
    write_jsonl(
        out / "instances.jsonl",
        (instance_record(m) for i in state.images_up_to(K) for m in state.instances.get(i, ())),
    )
    write_json(out / "folds.json", folds_record(state.folds))
    if state.final_corloc is not None:
        print(f"final CorLoc {fmt_float(state.final_corloc):.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_eval_corloc(args) -> int:
    loaded = load_dataset(load_manifest(args.manifest), with_scores=False)
    instances = load_instances(args.instances)
    preds = {}
    for m in instances:
        if m.image_id not in loaded.ground_truth:
            raise ValidationError(f"{args.instances}: unknown image {m.image_id!r}")
        preds[(m.image_id, m.class_index)] = m.box
    gts = {i: loaded.ground_truth[i] for i in sorted({m.image_id for m in instances})} \
        if args.only_predicted else loaded.ground_truth
    res = corloc(preds, gts)
    names = loaded.manifest.classes
    rows = [
        (names[c], res.hits[c], res.totals[c], res.per_class[c]) for c in sorted(res.per_class)
    ]
    rows.append(("mean", sum(res.hits.values()), sum(res.totals.values()), res.mean))
    write_csv(_out_stream(args.out), ("class", "hits", "total", "corloc"), rows)
    return EXIT_OK


def cmd_eval_ap(args) -> int:
    loaded = load_dataset(load_manifest(args.manifest), split=args.split, with_scores=False)
    dets = load_detections(args.detections)
    for d in dets:
        if d.image_id not in loaded.ground_truth:
            raise ValidationError(f"{args.detections}: unknown image {d.image_id!r}")
    names = loaded.manifest.classes
    per_class, mean_ap = mean_average_precision(dets, loaded.ground_truth, len(names), args.mode)
    rows = [(names[c], per_class[c]) for c in range(len(names))]
    rows.append(("mean", mean_ap))
    write_csv(_out_stream(args.out), ("class", "ap"), rows)
    if args.errors:
        groups = [[names.index(n) for n in g.split(",")] for g in args.similar or ()]
        hist = categorize_errors(dets, loaded.ground_truth, groups)
        write_csv(args.errors, ("category", "count"), sorted(hist.items()))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    scenes = generate_benchmark(args.count, args.seed, args.classes)
    names = [f"class{c}" for c in range(args.classes)]
    entries = []
    for s in scenes:
        i = s.record.image_id
        ann = VocAnnotation(i, s.record.width, s.record.height, s.ground_truth, s.record.labels)
        write_voc_annotation(out / "annotations" / f"{i}.xml", ann, names)
        entries.append(ManifestEntry(i, f"annotations/{i}.xml", "proposals.jsonl", "scores.jsonl"))
    write_jsonl(out / "proposals.jsonl", (proposal_record(s.record) for s in scenes))
    if args.raw:
        rows = []
        for s in scenes:
            rows.append(score_record(s.record.image_id, s.cls_stream))
            rows.append(score_record(s.record.image_id, s.det_stream))
        write_jsonl(out / "scores.jsonl", rows)
    else:
        write_jsonl(out / "scores.jsonl", (score_record(s.record.image_id, s.scores) for s in scenes))
    save_features(out / "features.npz", {s.record.image_id: s.features for s in scenes})
    manifest = DatasetManifest("synthetic", names, entries, out, "features.npz")
    write_json(out / "manifest.json", manifest.to_record())
    write_json(
        out / "generator.json",
        {"count": args.count, "master_seed": args.seed, "classes": args.classes},
    )
    return EXIT_OK


def cmd_report(args) -> int:
    if args.sweep == "k":
        values = args.values or [1, 2, 3, 4, 5]
        grid = [(int(v), args.tau) for v in values]
    else:
        values = args.values or [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
        grid = [(args.k, float(v)) for v in values]
    if args.manifest:
        loaded, dataset, _ = _load(args.manifest)
        features = loaded.features
        if not features:
            raise ValidationError("report needs a 'features' file in the dataset manifest")
    else:
        scenes = generate_benchmark(BENCHMARK_SIZE, BENCHMARK_SEED)
        dataset = dataset_from_scenes(scenes)
        features = {s.record.image_id: s.features for s in scenes}
    template = SyntheticAdapter(features, dataset.records, len(dataset.class_names), **ADAPTER_DEFAULTS)
    rows = []
    for K, tau in grid:
        run = run_zigzag(dataset, template.snapshot, K, tau, args.seed)
        by_fold = run.state.logs[-1].corloc_by_fold
        rows.append((K, tau, args.seed, run.state.final_corloc,
                     ";".join(f"{by_fold[f]:.9g}" for f in sorted(by_fold))))
        log.info("K=%d tau=%g corloc=%.4f", K, tau, run.state.final_corloc)
    write_csv(_out_stream(args.out), ("k", "tau", "seed", "corloc", "corloc_by_fold"), rows)
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zigzag", description="Difficulty-aware weakly supervised localization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("difficulty", help="per-image difficulty reports (JSONL)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_difficulty)

    s = sub.add_parser("mine", help="initial mined instances (JSONL)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--grid-step", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("folds", help="easy-to-hard fold assignment (JSON)")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest")
    g.add_argument("--reports", help="difficulty report JSONL")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_folds)

    s = sub.add_parser("run", help="full progressive training run")
    s.add_argument("--manifest")
    s.add_argument("--replay", help="run manifest of an earlier run to repeat")
    s.add_argument("--k", type=int)
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--adapter", choices=("synthetic", "file"), default="synthetic")
    s.add_argument("--dumps", nargs="+", help="score dumps, one per phase (file adapter)")
    s.add_argument("--steps", type=int, help="training steps per phase (synthetic adapter)")
    s.add_argument("--lr", type=float, help="learning rate (synthetic adapter)")
    s.add_argument("--unweighted", action="store_true", help="give every positive weight 1")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval-corloc", help="CorLoc table (CSV)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--instances", required=True)
    s.add_argument("--only-predicted", action="store_true",
                   help="score only images that appear in the instance file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_corloc)

    s = sub.add_parser("eval-ap", help="average precision table (CSV)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--mode", choices=("eleven_point", "area"), default="eleven_point")
    s.add_argument("--errors", help="also write an error-category histogram CSV here")
    s.add_argument("--similar", nargs="*", help="similarity groups, e.g. cat,dog")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval_ap)

    s = sub.add_parser("synth", help="write the synthetic benchmark as a dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=BENCHMARK_SIZE)
    s.add_argument("--seed", type=int, default=BENCHMARK_SEED)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--raw", action="store_true", help="dump the two raw streams instead")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("report", help="K or tau sweep (CSV)")
    s.add_argument("--sweep", choices=("k", "tau"), required=True)
    s.add_argument("--values", type=float, nargs="+")
    s.add_argument("--k", type=int, default=3, help="K for the tau sweep")
    s.add_argument("--tau", type=float, default=0.1, help="tau for the K sweep")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--manifest", help="dataset to sweep on (default: built-in benchmark)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
