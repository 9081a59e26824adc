"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed past
pytest's capture so they appear in the normal output.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from anchor3d.assignment import AssignmentConfig, Category, GroundTruth, Label, assign_anchors
from anchor3d.cli import main
from anchor3d.geometry import AnchorSpec, Box3, anchor_array, iou3d
from anchor3d.gradcheck import LOSS_NAMES, run_gradcheck
from anchor3d.inference import Detection, nms
from anchor3d.losses import LossParams, iou_balance_weights, iou_balanced_cls_loss, similarity_loss_value
from anchor3d.metrics import roc_auc
from anchor3d.synthetic import (
    DESK_ANCHORS,
    SyntheticSpec,
    ToyScorer,
    generate_dataset,
    mean_positive_cosine,
    prepare_volume,
    train_toy,
)

from oracles import cross_entropy_mp, greedy_nms_reference, lattice_iou, pairwise_auc

# end-to-end fixture: dataset seeds, training seed and what they achieved
TRAIN_SEED, TEST_SEED, MODEL_SEED = 1, 2, 0
RECORDED = {"miou": 54.51, "fps_per_volume": 0.55, "sensitivity": 100.00, "auc": 0.8011}


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nAC{number:<2d} {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def cli(*argv) -> None:
    code = main([str(a) for a in argv])
    assert code == 0, f"anchor3d {' '.join(map(str, argv))} exited {code}"


def test_ac01_weight_sum_identity(capsys):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(1, 257))
        eta = (0.0, 0.5, 1.0, 1.5, 3.0)[i % 5]
        ious = rng.uniform(1e-3, 1.0, n)
        ces = rng.exponential(1.0, n) + 1e-6
        w = iou_balance_weights(ious, ces, eta)
        total = math.fsum(ces)
        worst = max(worst, abs(math.fsum(w * ces) - total) / total)
    elapsed = time.perf_counter() - start
    report(capsys, 1, worst <= 1e-9 and elapsed < 5.0,
           f"weight-sum identity: worst rel err {worst:.2e} (<= 1e-9), {elapsed:.2f}s (< 5s)")


def test_ac02_eta_zero_is_cross_entropy(capsys):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        n_pos, n_neg = int(rng.integers(1, 40)), int(rng.integers(0, 40))
        pl, nl = rng.normal(0, 3, (n_pos, 3)), rng.normal(0, 3, (n_neg, 3))
        t = rng.integers(1, 3, n_pos)
        got = iou_balanced_cls_loss(pl, t, rng.uniform(0.01, 1, n_pos), nl, 0.0).value
        want = math.fsum([cross_entropy_mp(l, k) for l, k in zip(pl, t)] + [cross_entropy_mp(l, 0) for l in nl])
        worst = max(worst, abs(got - want) / want)
    report(capsys, 2, worst <= 1e-12, f"eta=0 equals plain CE: worst rel err {worst:.2e} (<= 1e-12)")


def test_ac03_gradient_check(capsys):
    start = time.perf_counter()
    worst = run_gradcheck(100, LossParams(), seed=0, rtol=1e-4, atol=1e-6, step=1e-5)
    elapsed = time.perf_counter() - start
    ok = all(worst[n].passed for n in LOSS_NAMES) and elapsed < 30.0
    errs = ", ".join(f"{n} {worst[n].worst_rel_error:.1e}" for n in LOSS_NAMES)
    report(capsys, 3, ok, f"gradients vs central differences on 100 batches: {errs}; {elapsed:.1f}s (< 30s)")


def test_ac04_similarity_range_and_endpoints(capsys):
    grid = np.linspace(-1.0, 1.0, 201)
    values = [similarity_loss_value(a, b) for a in grid for b in grid]
    ok = (min(values) >= 0.0 and max(values) <= 1.0
          and similarity_loss_value(1.0, -1.0) == 0.0 and similarity_loss_value(-1.0, 1.0) == 1.0)
    report(capsys, 4, ok, f"similarity loss in [{min(values)}, {max(values)}], endpoints exact")


def test_ac05_iou_lattice_oracle(capsys):
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(1000):
        boxes = []
        for _ in range(2):
            lo = rng.integers(0, 8, 3)
            hi = lo + rng.integers(1, 7, 3)
            boxes.append(Box3.from_corners(lo.tolist(), hi.tolist()))
        worst = max(worst, abs(iou3d(*boxes) - lattice_iou(boxes[0].to_list(), boxes[1].to_list())))
    cube = Box3(5, 5, 5, 4, 4, 4)
    exact = (iou3d(cube, cube) == 1.0 and iou3d(cube, Box3(20, 5, 5, 4, 4, 4)) == 0.0
             and iou3d(cube, Box3(4, 4, 4, 2, 2, 2)) == 0.125)
    report(capsys, 5, worst <= 1e-9 and exact,
           f"IoU vs lattice count on 1000 pairs: worst abs err {worst:.1e}; identity/disjoint/nested exact {exact}")


def _random_detections(rng, n):
    return [Detection(Box3(*rng.uniform(0, 30, 3), *rng.uniform(2, 12, 3)), float(rng.integers(0, 20)) / 19)
            for _ in range(n)]


def test_ac06_nms_reference(capsys):
    rng = np.random.default_rng(106)
    mismatches = not_idempotent = 0
    for _ in range(1000):
        dets = _random_detections(rng, int(rng.integers(0, 51)))
        thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        kept = nms(dets, thr)
        want = greedy_nms_reference([d.box.to_list() for d in dets], [d.score for d in dets], thr)
        mismatches += [id(d) for d in kept] != [id(dets[i]) for i in want]
        not_idempotent += [id(d) for d in nms(kept, thr)] != [id(d) for d in kept]
    report(capsys, 6, mismatches == 0 and not_idempotent == 0,
           f"NMS vs reference on 1000 sets: {mismatches} mismatches, {not_idempotent} non-idempotent")


def test_ac07_auc_pairwise(capsys):
    rng = np.random.default_rng(107)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n).astype(bool)
        labels[0], labels[1] = True, False
        # every other set uses a coarse grid so tied scores are common
        scores = rng.integers(0, 6, n) / 5 if i % 2 else rng.uniform(0, 1, n)
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_auc(scores.tolist(), labels.tolist())))
    report(capsys, 7, worst <= 1e-12, f"trapezoid AUC vs pairwise concordance on 200 sets: worst {worst:.1e}")


def test_ac08_anchor_count(capsys):
    spec = AnchorSpec()
    n = len(anchor_array(spec, (4, 2, 4)))
    report(capsys, 8, len(spec.basic_sizes) == 5 and n == 4000, f"5 sizes on (4,2,4) grid: {n} anchors (4000)")


def _shifted(iou: float) -> Box3:
    o = 20 * iou / (1 + iou)
    return Box3(10 - o, 0, 0, 10, 10, 10)


def test_ac09_assignment_cases(capsys):
    gt = [GroundTruth(Box3(0, 0, 0, 10, 10, 10), Category.BENIGN)]
    cfg = AssignmentConfig()
    cases = {
        "0.25 positive": assign_anchors([gt[0].box, _shifted(0.25)], gt, cfg)[1].label is Label.POSITIVE,
        "0.05 negative": assign_anchors([gt[0].box, _shifted(0.05)], gt, cfg)[1].label is Label.NEGATIVE,
        "0.15 ignore": assign_anchors([gt[0].box, _shifted(0.15)], gt, cfg)[1].label is Label.IGNORE,
        "best 0.12 positive": assign_anchors([_shifted(0.12), _shifted(0.05)], gt, cfg)[0].label is Label.POSITIVE,
    }
    report(capsys, 9, all(cases.values()), ", ".join(f"{k}: {v}" for k, v in cases.items()))


def test_ac10_end_to_end(tmp_path, capsys):
    start = time.perf_counter()
    cli("synth-gen", "--count", 30, "--seed", TRAIN_SEED, "--out", tmp_path / "train")
    cli("synth-gen", "--count", 20, "--seed", TEST_SEED, "--out", tmp_path / "test")
    cli("train-toy", "--dataset", tmp_path / "train", "--seed", MODEL_SEED, "--out", tmp_path / "model")
    cli("infer", "--model", tmp_path / "model" / "model.json", "--dataset", tmp_path / "test",
        "--out", tmp_path / "det.jsonl")
    cli("eval", "--gt", tmp_path / "test" / "gts.jsonl", "--detections", tmp_path / "det.jsonl",
        "--out", tmp_path / "report.json")
    elapsed = time.perf_counter() - start
    doc = json.loads((tmp_path / "report.json").read_text())
    det, cls = doc["detection"], doc["classification"]
    auc = cls["auc"] if cls else float("nan")
    ok = det["sensitivity"] >= 0.90 and det["fps_per_volume"] <= 2.0 and auc >= 0.75 and elapsed < 300
    report(capsys, 10, ok,
           f"seeds train={TRAIN_SEED} test={TEST_SEED} model={MODEL_SEED}: row {doc['table_row']}, "
           f"AUC {auc:.4f}, {elapsed:.0f}s (need sens >= 0.90, FPs <= 2, AUC >= 0.75, < 300s)")
    assert doc["table_row"] == f"{RECORDED['miou']:.2f} {RECORDED['fps_per_volume']:.2f} {RECORDED['sensitivity']:.2f}"
    assert round(auc, 4) == RECORDED["auc"]


def test_ac11_similarity_ablation(capsys):
    data = generate_dataset(SyntheticSpec(), 10, seed=3)
    prepared = [prepare_volume(v, g, DESK_ANCHORS, AssignmentConfig()) for v, g in data]
    cos = {}
    for lam in (0.7, 0.0):
        scorer, _ = train_toy(None, ToyScorer.initialise(64, seed=3), LossParams(lam=lam), steps=200,
                              seed=3, prepared=prepared)
        cos[lam] = mean_positive_cosine(scorer, prepared, LossParams(), seed=3)
    report(capsys, 11, cos[0.7] > cos[0.0],
           f"mean positive-pair cosine: lambda=0.7 {cos[0.7]:.4f} vs lambda=0 {cos[0.0]:.4f}")


def _snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _run_every_command(root: Path, capsys) -> str:
    small = ["--set", "toy.steps=10", "--set", "toy.classifier_steps=10", "--set", "toy.emb_dim=8"]
    cli("synth-gen", "--count", 3, "--seed", 4, "--out", root / "data")
    cli("anchors", "--out", root / "anchors.jsonl")
    cli("assign", "--dataset", root / "data", "--out", root / "assign.jsonl")
    cli("gradcheck", "--n-batches", 3, "--out", root / "grad.json")
    cli("train-toy", "--dataset", root / "data", "--seed", 0, "--out", root / "model", *small)
    cli("infer", "--model", root / "model" / "model.json", "--dataset", root / "data", "--out", root / "det.jsonl")
    gt = root / "data" / "gts.jsonl"
    cli("eval", "--gt", gt, "--detections", root / "det.jsonl", "--out", root / "report.json")
    cli("froc", "--gt", gt, "--detections", root / "det.jsonl", "--out", root / "froc.csv")
    cli("show-config", "--out", root / "config.yaml")
    return capsys.readouterr().out


def test_ac12_cli_determinism(tmp_path, capsys):
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        out = _run_every_command(tmp_path / name, capsys)
        runs.append((_snapshot(tmp_path / name), out.replace(str(tmp_path / name), "<root>")))
    (files_a, out_a), (files_b, out_b) = runs
    differing = sorted(k for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    report(capsys, 12, not differing and out_a == out_b,
           f"{len(files_a)} output files from 9 commands byte-identical across reruns; differing: {differing or 'none'}")
