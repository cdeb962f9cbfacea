"""Acceptance gate: one test per criterion, each printing a PASS/FAIL verdict.

Run with ``pytest tests/test_acceptance.py -v -s``; the verdicts are also
repeated in the terminal summary of any pytest run that includes this file.
"""

from __future__ import annotations

import csv
import time
from fractions import Fraction

import numpy as np
import pytest

from fixtures import mining_fixture, uniform_row
from oracles import eleven_point_ap, map_decimal, meas_exact, mine_oracle, voc_match
from zigzag.cli import main
from zigzag.core import BBox, ScoreKind, ScoreMatrix
from zigzag.difficulty import accumulate, meas
from zigzag.evaluation import Detection, GroundTruth, GTObject, average_precision, match_detections
from zigzag.masking import FeatureGrid, apply_mask, feature_extent, map_pixel_to_feature, plan_mask
from zigzag.mining import heat_map, mine_instance
from zigzag.pipeline import run_benchmark
from zigzag.scoring import class_factor, image_probability, normalize_two_stream, region_factor

# value as stated for the [0.5, 0.3, 0.2] row; the level sum behind it is off by 0.4
STATED_FIXTURE_MEAS = 0.40606
FIXTURE_MEAS = Fraction(73, 165)


def mean_eas(row) -> float:
    return meas(accumulate(np.asarray(row, dtype=float)))


def test_criterion_1_meas_unit_oracle(verdict):
    t0 = time.perf_counter()
    uniform_err = max(abs(mean_eas(uniform_row(n)) - 1 / n) for n in range(1, 101))
    concentrated = mean_eas([0.0, 1.0, 0.0, 0.0])
    fixture = mean_eas([0.5, 0.3, 0.2])
    elapsed = time.perf_counter() - t0
    checks = {
        "uniform": uniform_err <= 1e-9,
        "concentrated": concentrated == 1.0,
        "fixture stated": abs(fixture - STATED_FIXTURE_MEAS) <= 1e-6,
        "runtime": elapsed < 1.0,
    }
    verdict(1, all(checks.values()),
            f"uniform err {uniform_err:.1e}, concentrated {concentrated}, fixture {fixture:.6f} "
            f"vs stated {STATED_FIXTURE_MEAS}, {elapsed:.3f}s")
    # everything except the stated fixture value must hold
    assert checks["uniform"] and checks["concentrated"] and checks["runtime"]
    assert meas_exact([Fraction(5, 10), Fraction(3, 10), Fraction(2, 10)]) == FIXTURE_MEAS
    assert fixture == pytest.approx(float(FIXTURE_MEAS), abs=1e-12)


@pytest.mark.xfail(
    strict=True,
    reason="stated fixture value 0.40606 sums the level scores to 4.4667; the exact sum is 4.8667 (73/165)",
)
def test_criterion_1_stated_fixture_value():
    assert mean_eas([0.5, 0.3, 0.2]) == pytest.approx(STATED_FIXTURE_MEAS, abs=1e-6)


def test_criterion_2_concentration_monotone(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 51))
        row = rng.random(n) * (rng.random(n) < 0.8)
        if row.sum() == 0:
            row[0] = 1.0
        # move mass from a donor to an entry at least as large
        j = int(rng.choice(np.flatnonzero(row)))
        i = int(rng.choice(np.flatnonzero(row >= row[j])))
        if i == j:
            continue
        moved = row.copy()
        eps = rng.uniform(0, row[j])
        moved[j] -= eps
        moved[i] += eps
        worst = max(worst, mean_eas(row) - mean_eas(moved))
    elapsed = time.perf_counter() - t0
    # float prefix sums are compared at the 1e-12 level tolerance
    ok = worst <= 1e-12 and elapsed < 10
    verdict(2, ok, f"largest decrease {worst:.1e}, {elapsed:.2f}s")
    assert ok


def test_criterion_3_mining_oracle(verdict):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(500):
        rec, s, boxes, scores = mining_fixture(rng)
        expected = mine_oracle(rec.width, rec.height, boxes, scores)
        mismatches += mine_instance(heat_map(rec, s, 0)).to_list() != expected
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30
    verdict(3, ok, f"{mismatches}/500 mismatches, {elapsed:.2f}s")
    assert ok


def test_criterion_4_mapping_and_masking(verdict):
    mapping_errors = 0
    for T in (8, 16, 32):
        for u in range(1, 10 * T + 1):
            mapping_errors += map_pixel_to_feature(u, u, T) != (map_decimal(u, T), map_decimal(u, T))
            mapping_errors += map_pixel_to_feature(float(u), 1.0, T)[0] != map_decimal(u, T)

    rng = np.random.default_rng(4)
    mask_errors = 0
    for _ in range(100):
        T = int(rng.choice([4, 8, 16]))
        W, H = int(rng.integers(8, 200)), int(rng.integers(8, 200))
        grid = FeatureGrid(rng.random((int(rng.integers(1, 4)), feature_extent(H, T), feature_extent(W, T))) + 0.5)
        x = np.sort(rng.integers(0, W + 1, 2))
        y = np.sort(rng.integers(0, H + 1, 2))
        obj = BBox(float(x[0]), float(y[0]), float(max(x[1], x[0] + 1)), float(max(y[1], y[0] + 1)))
        plan = plan_mask(obj, float(rng.uniform(0.01, 0.9)), rng, stride=T)
        # cells of every pixel in the masked sub-box
        o = plan.omega
        cells = {
            (map_decimal(u, T), map_decimal(v, T))
            for u in range(int(o.x_min) + 1, int(o.x_max) + 1)
            for v in range(int(o.y_min) + 1, int(o.y_max) + 1)
        }
        mask_errors += cells != set(plan.mapped_cells)
        out = apply_mask(grid, plan).values
        expected = grid.values.copy()
        for cu, cv in cells:
            if cu <= grid.width_f and cv <= grid.height_f:
                expected[:, cv - 1, cu - 1] = 0.0
        mask_errors += out.tobytes() != expected.tobytes()
    ok = mapping_errors == 0 and mask_errors == 0
    verdict(4, ok, f"{mapping_errors} mapping errors over T in 8/16/32, {mask_errors} mask errors on 100 grids")
    assert ok


def test_criterion_5_scoring_invariants(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    sum_err = shift_err = 0.0
    phi_ok = True
    for _ in range(1000):
        C, R = int(rng.integers(1, 21)), int(rng.integers(1, 301))
        c = rng.normal(0, 5, (C, R))
        d = rng.normal(0, 5, (C, R))
        cs, ds = ScoreMatrix(c, ScoreKind.RAW_CLS_STREAM), ScoreMatrix(d, ScoreKind.RAW_DET_STREAM)
        sum_err = max(sum_err, np.abs(class_factor(cs).sum(axis=0) - 1).max(),
                      np.abs(region_factor(ds).sum(axis=1) - 1).max())
        x = normalize_two_stream(cs, ds)
        phi = image_probability(x)
        phi_ok &= bool(np.all((phi >= 0) & (phi <= 1)))
        a, b = rng.normal(0, 20, R), rng.normal(0, 20, (C, 1))
        shifted = normalize_two_stream(
            ScoreMatrix(c + a, ScoreKind.RAW_CLS_STREAM), ScoreMatrix(d + b, ScoreKind.RAW_DET_STREAM)
        )
        shift_err = max(shift_err, np.abs(shifted.values - x.values).max())
    elapsed = time.perf_counter() - t0
    ok = sum_err <= 1e-9 and shift_err <= 1e-9 and phi_ok and elapsed < 5
    verdict(5, ok, f"sum err {sum_err:.1e}, shift err {shift_err:.1e}, phi in [0,1] {phi_ok}, {elapsed:.2f}s")
    assert ok


def _detection_fixture(rng):
    images = [f"im{i}" for i in range(int(rng.integers(1, 4)))]

    def box():
        x0, y0 = rng.integers(0, 15, size=2)
        w, h = rng.integers(2, 8, size=2)
        return (float(x0), float(y0), float(x0 + w), float(y0 + h))

    objs = {i: [] for i in images}
    for _ in range(int(rng.integers(0, 11))):
        objs[images[int(rng.integers(len(images)))]].append((0, box(), bool(rng.random() < 0.2)))
    dets = [
        (images[int(rng.integers(len(images)))], box(), float(rng.integers(0, 5)) / 4)
        for _ in range(int(rng.integers(0, 11)))
    ]
    return objs, dets


def test_criterion_6_evaluation_oracle(verdict):
    sq = BBox(0, 0, 10, 10)
    one = {"a": GroundTruth("a", [GTObject(0, sq)])}
    two = {"a": GroundTruth("a", [GTObject(0, sq), GTObject(0, BBox(50, 50, 60, 60))])}
    hand = [
        (average_precision([Detection("a", 0, BBox(0, 0, 10, 6), 0.7)], one, 0), 1.0),
        (average_precision([Detection("a", 0, sq, 0.9), Detection("a", 0, sq, 0.8)], one, 0), 1.0),
        (average_precision([Detection("a", 0, sq, 0.9), Detection("a", 0, BBox(0, 0, 10, 2), 0.8)], two, 0), 6 / 11),
    ]
    hand_err = max(abs(a - b) for a, b in hand)

    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(200):
        objs, dets = _detection_fixture(rng)
        gts = {i: GroundTruth(i, [GTObject(c, BBox(*b), d) for c, b, d in o]) for i, o in objs.items()}
        ds = [Detection(i, 0, BBox(*b), s) for i, b, s in dets]
        got = match_detections(ds, gts, 0)
        ref = voc_match(dets, objs, 0)
        claimed = [(dets[n][0], m.gt_index) for n, m in enumerate(got) if m.status == "tp"]
        mismatches += [m.status for m in got] != ref or len(claimed) != len(set(claimed))
        npos = sum(1 for o in objs.values() for _, _, dif in o if not dif)
        if npos:
            mismatches += abs(average_precision(ds, gts, 0) - eleven_point_ap(ref, npos)) > 1e-9
    ok = hand_err <= 1e-9 and mismatches == 0
    verdict(6, ok, f"hand AP err {hand_err:.1e}, {mismatches}/200 matching mismatches")
    assert ok


def test_criterion_7_fold_trend(verdict, benchmark_scenes):
    t0 = time.perf_counter()
    run = run_benchmark(3, 0.1, 0, scenes=benchmark_scenes)
    elapsed = time.perf_counter() - t0
    # fold k as relocalized right after the detector first trains on it
    by_fold = [run.state.logs[k].corloc_by_fold[k] for k in (1, 2, 3)]
    ok = by_fold[0] >= by_fold[1] >= by_fold[2] and by_fold[0] >= 0.85 and elapsed < 120
    verdict(7, ok, "fold CorLoc " + " / ".join(f"{v:.3f}" for v in by_fold) + f", {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def tau_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep") / "tau.csv"
    t0 = time.perf_counter()
    assert main(["report", "--sweep", "tau", "--k", "3", "--seed", "0", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = {float(r["tau"]): float(r["corloc"]) for r in csv.DictReader(fh)}
    return rows, time.perf_counter() - t0


def test_criterion_8_ablation_trend(verdict, benchmark_scenes, tau_sweep):
    rows, sweep_time = tau_sweep
    t0 = time.perf_counter()
    baseline = run_benchmark(1, 0.0, 0, scenes=benchmark_scenes).state.final_corloc
    elapsed = sweep_time + time.perf_counter() - t0
    full = rows[0.1]
    margin = full - baseline
    ok = margin >= 0.02 and rows[0.5] < rows[0.1] and elapsed < 600
    verdict(8, ok, f"K=3 tau=0.1 {full:.3f} vs K=1 tau=0 {baseline:.3f} (+{100 * margin:.1f} pts), "
                   f"tau=0.5 {rows[0.5]:.3f}, {elapsed:.1f}s")
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="on the synthetic benchmark CorLoc falls monotonically with tau; masking gives no gain at small tau",
)
def test_tau_sweep_best_at_small_nonzero_tau(tau_sweep):
    rows, _ = tau_sweep
    print("tau sweep: " + ", ".join(f"{t:g}->{c:.3f}" for t, c in sorted(rows.items())))
    best = max(sorted(rows), key=lambda t: rows[t])
    assert 0 < best <= 0.2


def test_criterion_9_determinism(verdict, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data)]) == 0
    names = ("log.jsonl", "instances.jsonl", "folds.json", "manifest.json")
    outs = []
    for run in ("a", "b"):
        assert main(["run", "--manifest", str(data / "manifest.json"), "--k", "3", "--tau", "0.1",
                     "--seed", "0", "--out", str(tmp_path / run)]) == 0
        outs.append([(tmp_path / run / n).read_bytes() for n in names])
    same = [n for n, a, b in zip(names, *outs) if a == b]
    ok = len(same) == len(names) and all(len(b) > 0 for b in outs[0])
    verdict(9, ok, f"{len(same)}/{len(names)} output files byte-identical")
    assert ok
