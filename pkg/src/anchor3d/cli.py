"""``anchor3d`` command-line interface.

Exit status: 0 on success, 1 for validation or domain errors (bad config,
malformed records, failed gradient check, unknown volume ids), 2 for I/O
errors (missing or unwritable paths).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats
from .config import ToolkitConfig, dump_config, load_config
from .assignment import IGNORE, NEGATIVE, POSITIVE, assign_anchor_array
from .geometry import anchor_array
from .gradcheck import LOSS_NAMES, run_gradcheck
from .metrics import (
    VolumeResult,
    aggregate,
    classification_report,
    froc,
    lesion_malignancy_scores,
    size_stratified_sensitivity,
)
from .synthetic import (
    GenerationError,
    ToyClassifier,
    ToyScorer,
    TrainingError,
    dataset_seeds,
    detect_volume,
    feature_shape_for,
    generate_volume,
    prepare_volume,
    train_classifier,
    train_toy,
)

MODEL_FORMAT = "anchor3d-model/1"
MANIFEST_FORMAT = "anchor3d-dataset/1"
GT_FILE = "gts.jsonl"


class CommandError(Exception):
    """A domain failure to report with exit status 1."""


# ----------------------------------------------------------------------------
# dataset and model files
# ----------------------------------------------------------------------------


def write_dataset(out_dir: Path, config: ToolkitConfig, count: int, seed: int) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = config.synthetic
    entries, gt_records = [], []
    for i, vol_seed in enumerate(dataset_seeds(seed, count)):
        vid = f"vol{i:04d}"
        volume, gts = generate_volume(spec, vol_seed)
        name = f"{vid}.vol"
        formats.write_volume(out_dir / name, volume, spec.voxel_spacing, vol_seed)
        entries.append({"volume_id": vid, "file": name, "seed": vol_seed, "n_lesions": len(gts)})
        gt_records.append(formats.gt_record(vid, gts, spec.voxel_spacing))
    formats.write_gts(out_dir / GT_FILE, gt_records)
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "count": count,
        "gt_file": GT_FILE,
        "synthetic": config.to_dict()["synthetic"],
        "volumes": entries,
    }
    formats.write_json(out_dir / "manifest.json", manifest)
    return manifest


def read_dataset(path) -> list[tuple[str, np.ndarray, list, tuple]]:
    """``(volume_id, volume, gts, spacing)`` for every volume in a dataset directory."""
    root = Path(path)
    manifest = formats.read_json(root / "manifest.json")
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise formats.FormatError(f"{root / 'manifest.json'}: not a {MANIFEST_FORMAT} manifest")
    try:
        gts = formats.read_gts(root / manifest["gt_file"])
        out = []
        for entry in manifest["volumes"]:
            vid = entry["volume_id"]
            volume, header = formats.read_volume(root / entry["file"])
            lesions, spacing = gts.get(vid, ([], tuple(header["spacing"])))
            out.append((vid, volume, lesions, spacing))
    except (KeyError, TypeError) as exc:
        raise formats.FormatError(f"{root / 'manifest.json'}: malformed manifest: {exc}") from None
    return out


def model_document(scorer: ToyScorer, classifier: Optional[ToyClassifier], config: ToolkitConfig,
                   seed: int) -> dict:
    return {
        "format": MODEL_FORMAT,
        "seed": seed,
        "anchors": config.to_dict()["anchors"],
        "feature_threshold": config.synthetic.threshold,
        "scorer": scorer.to_dict(),
        "classifier": classifier.to_dict() if classifier is not None else None,
    }


def read_model(path):
    from .geometry import AnchorSpec

    doc = formats.read_json(path)
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise formats.FormatError(f"{path}: not a {MODEL_FORMAT} file")
    try:
        scorer = ToyScorer.from_dict(doc["scorer"])
        clf = ToyClassifier.from_dict(doc["classifier"]) if doc.get("classifier") else None
        anchors = AnchorSpec(**doc["anchors"])
        return scorer, clf, anchors, float(doc["feature_threshold"])
    except (KeyError, TypeError) as exc:
        raise formats.FormatError(f"{path}: malformed model: {exc}") from None


def _results_from_files(gt_path, det_path) -> list[VolumeResult]:
    gts = formats.read_gts(gt_path)
    dets = formats.read_detections(det_path)
    unknown = sorted({vid for vid, _ in dets if vid not in gts})
    if unknown:
        raise CommandError(f"detections reference unknown volume_id(s): {', '.join(unknown)}")
    by_volume: dict[str, list] = {vid: [] for vid in gts}
    for vid, det in dets:
        by_volume[vid].append(det)
    return [VolumeResult(vid, lesions, by_volume[vid], spacing) for vid, (lesions, spacing) in gts.items()]


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def cmd_synth_gen(args, config: ToolkitConfig) -> int:
    if args.count < 0:
        raise CommandError("--count must be >= 0")
    manifest = write_dataset(_out(args, "dataset"), config, args.count, config.seed)
    lesions = sum(e["n_lesions"] for e in manifest["volumes"])
    print(f"wrote {args.count} volumes ({lesions} lesions) to {_out(args, 'dataset')}")
    return 0


def cmd_anchors(args, config: ToolkitConfig) -> int:
    if args.feature_shape is not None:
        shape = tuple(int(v) for v in args.feature_shape.split(","))
    else:
        shape = feature_shape_for(config.synthetic.volume_shape, config.anchors)
    anchors = anchor_array(config.anchors, shape)
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in anchors.tolist():
                fh.write(formats.dumps_line(row) + "\n")
    print(f"{len(anchors)} anchors ({config.anchors.anchors_per_cell} per cell on a {shape} grid)")
    return 0


def cmd_assign(args, config: ToolkitConfig) -> int:
    dataset = read_dataset(args.dataset)
    out_path = _out(args, "assignments.jsonl")
    totals = {POSITIVE: 0, NEGATIVE: 0, IGNORE: 0}
    with open(out_path, "w", encoding="utf-8") as fh:
        for vid, volume, gts, _ in dataset:
            anchors = anchor_array(config.anchors, feature_shape_for(volume.shape, config.anchors))
            gt_boxes = np.array([g.box.to_list() for g in gts]).reshape(-1, 6)
            a = assign_anchor_array(anchors, gt_boxes, config.assignment)
            counts = {lab: int(np.sum(a.labels == lab)) for lab in totals}
            for lab in totals:
                totals[lab] += counts[lab]
            pos = a.positive
            rec = {
                "volume_id": vid,
                "n_anchors": len(anchors),
                "n_positive": counts[POSITIVE],
                "n_negative": counts[NEGATIVE],
                "n_ignore": counts[IGNORE],
                "positives": [[int(i), int(a.gt_index[i]), float(a.iou[i])] for i in pos.tolist()],
            }
            fh.write(formats.dumps_line(rec) + "\n")
    print(f"positive {totals[POSITIVE]} negative {totals[NEGATIVE]} ignore {totals[IGNORE]}")
    return 0


def cmd_gradcheck(args, config: ToolkitConfig) -> int:
    if args.tolerance <= 0 or args.atol <= 0:
        raise CommandError("tolerances must be > 0")
    if args.n_batches < 0:
        raise CommandError("--n-batches must be >= 0")
    if args.n_batches == 0:
        print("warning: 0 batches checked; passing vacuously", file=sys.stderr)
    worst = run_gradcheck(args.n_batches, config.loss, config.seed, args.tolerance, args.atol,
                          corrupt=args.corrupt)
    failed = []
    for name in LOSS_NAMES:
        r = worst[name]
        status = "ok" if r.passed else "FAIL"
        print(f"{name:6s} worst relative error {r.worst_rel_error:.3e} {status}")
        if not r.passed:
            failed.append(r)
    if args.out is not None:
        formats.write_json(args.out, {
            "n_batches": args.n_batches, "seed": config.seed, "rtol": args.tolerance, "atol": args.atol,
            "losses": {n: {"worst_rel_error": worst[n].worst_rel_error, "worst_index": worst[n].worst_index,
                           "passed": worst[n].passed} for n in LOSS_NAMES},
        })
    if failed:
        names = ", ".join(f"{r.loss} (component {r.worst_index})" for r in failed)
        raise CommandError(f"gradient check failed: {names}")
    return 0


def cmd_train_toy(args, config: ToolkitConfig) -> int:
    toy = config.toy
    if args.dataset is not None:
        dataset = [(v, g) for _, v, g, _ in read_dataset(args.dataset)]
    else:
        dataset = [generate_volume(config.synthetic, s) for s in dataset_seeds(config.seed, toy.train_volumes)]
    if not dataset:
        raise CommandError("training needs at least one volume")
    threshold = config.synthetic.threshold
    prepared = [prepare_volume(v, g, config.anchors, config.assignment, threshold) for v, g in dataset]
    scorer, history = train_toy(None, ToyScorer.initialise(toy.emb_dim, config.seed), config.loss,
                                steps=toy.steps, learning_rate=toy.learning_rate, seed=config.seed,
                                volumes_per_step=toy.volumes_per_step, prepared=prepared)
    clf = train_classifier(dataset, steps=toy.classifier_steps, learning_rate=toy.classifier_learning_rate,
                           seed=config.seed, threshold=threshold, context=toy.classifier_context)
    out_dir = _out(args, "model")
    out_dir.mkdir(parents=True, exist_ok=True)
    formats.write_json(out_dir / "model.json", model_document(scorer, clf, config, config.seed))
    keys = ("step", "l_rpn", "l_cls", "l_reg", "l_sim", "degenerate")
    with open(out_dir / "history.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for h in history:
            w.writerow([repr(h[k]) for k in keys])
    if history:
        print(f"l_rpn {history[0]['l_rpn']:.4f} -> {history[-1]['l_rpn']:.4f} over {len(history)} steps")
    return 0


def cmd_infer(args, config: ToolkitConfig) -> int:
    scorer, clf, anchors, threshold = read_model(args.model)
    dataset = read_dataset(args.dataset)
    items = []
    for vid, volume, _, spacing in dataset:
        result = detect_volume(scorer, volume, config.pipeline.resolve(spacing), anchors, None, vid, spacing,
                               clf, config.toy.fusion_weight, config.toy.pre_nms_top_n, threshold)
        items.extend((vid, d) for d in result.detections)
    formats.write_detections(_out(args, "detections.jsonl"), items)
    print(f"{len(items)} detections over {len(dataset)} volumes")
    return 0


def cmd_eval(args, config: ToolkitConfig) -> int:
    ev = config.evaluation
    results = _results_from_files(args.gt, args.detections)
    report = aggregate(results, ev.hit_threshold, ev.miss_as_zero)
    scores, labels = lesion_malignancy_scores(results, ev.hit_threshold)
    cls = None
    if len(labels) and labels.any() and not labels.all() and np.all(np.isfinite(scores)):
        cls = classification_report(scores, labels, ev.classification_threshold)._asdict()
    bins = size_stratified_sensitivity(results, ev.size_bins_cm3, ev.hit_threshold)
    doc = {
        "detection": report.to_dict(),
        "table_row": report.table_row(),
        "classification": cls,
        "size_bins": [b._asdict() for b in bins],
    }
    formats.write_json(_out(args, "report.json"), doc)
    print("mIoU(%) FPs Sensitivity(%)")
    print(report.table_row())
    if cls is not None:
        print(f"AUC {cls['auc']:.4f} accuracy {cls['accuracy']:.4f}")
    return 0


def cmd_froc(args, config: ToolkitConfig) -> int:
    if args.thresholds is not None:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    else:
        thresholds = np.linspace(0.0, 1.0, 101).tolist()
    results = _results_from_files(args.gt, args.detections)
    points = froc(results, thresholds, config.evaluation.hit_threshold)
    with open(_out(args, "froc.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fps_per_volume", "sensitivity"))
        for p in points:
            w.writerow([repr(p.threshold), repr(p.fps_per_volume), repr(p.sensitivity)])
    print(f"{len(points)} operating points")
    return 0


def cmd_show_config(args, config: ToolkitConfig) -> int:
    text = dump_config(config)
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable; value is parsed as YAML)")
    common.add_argument("--out", help="output path")

    parser = argparse.ArgumentParser(prog="anchor3d", description="3D anchor detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic dataset directory")
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("anchors", parents=[common], help="enumerate anchors for a feature grid")
    p.add_argument("--feature-shape", help="X,Y,Z feature grid (default: from the synthetic volume shape)")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("assign", parents=[common], help="label anchors against a dataset's lesions")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of loss gradients")
    p.add_argument("--n-batches", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4, help="relative tolerance")
    p.add_argument("--atol", type=float, default=1e-6, help="absolute tolerance")
    p.add_argument("--corrupt", choices=LOSS_NAMES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", parents=[common], help="train the linear scorer and classifier")
    p.add_argument("--dataset", help="dataset directory (default: generate from the config)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", parents=[common], help="detect lesions in a dataset")
    p.add_argument("--model", required=True, help="model.json written by train-toy")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score detections against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--detections", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("froc", parents=[common], help="FROC operating points as CSV")
    p.add_argument("--gt", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--thresholds", help="comma-separated ascending score thresholds (default 0, 0.01, ..., 1)")
    p.set_defaults(func=cmd_froc)

    p = sub.add_parser("show-config", parents=[common], help="print the effective config")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        config = load_config(args.config, overrides)
        return args.func(args, config)
    except OSError as exc:
        print(f"anchor3d: I/O error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, ValueError, ArithmeticError, GenerationError, TrainingError) as exc:
        print(f"anchor3d: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
