"""Detection and classification evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .assignment import Category, GroundTruth
from .geometry import iou_matrix
from .inference import Detection
from .losses import DomainError


@dataclass
class VolumeResult:
    volume_id: str
    gts: list[GroundTruth]
    detections: list[Detection]
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)
        if len(self.voxel_spacing) != 3 or any(s <= 0 for s in self.voxel_spacing):
            raise ValueError(f"voxel_spacing must be three positive values, got {self.voxel_spacing}")

    def iou_table(self) -> np.ndarray:
        """``(n_detections, n_gts)`` IoU matrix."""
        dets = np.array([d.box.to_list() for d in self.detections]).reshape(-1, 6)
        gts = np.array([g.box.to_list() for g in self.gts]).reshape(-1, 6)
        return iou_matrix(dets, gts)


class Match(NamedTuple):
    hits: list[int]
    false_positives: list[int]
    matched_ious: list[float]


def match_volume(r: VolumeResult, hit_threshold: float = 0.0) -> Match:
    """Hits, false positives and per-hit best IoU for one volume.

    A detection is a false positive when it does not overlap any ground truth
    at all. A ground truth is hit when some detection has IoU above
    ``hit_threshold`` with it.
    """
    table = r.iou_table()
    if table.size:
        best_per_det = table.max(axis=1)
        best_per_gt = table.max(axis=0)
    else:
        best_per_det = np.zeros(len(r.detections))
        best_per_gt = np.zeros(len(r.gts))
    fps = [i for i, v in enumerate(best_per_det.tolist()) if v == 0.0]
    hits = [g for g, v in enumerate(best_per_gt.tolist()) if v > hit_threshold]
    return Match(hits, fps, [float(best_per_gt[g]) for g in hits])


@dataclass
class MetricsReport:
    sensitivity: float
    fps_per_volume: float
    miou: float
    n_volumes: int
    n_lesions: int
    n_hits: int
    n_false_positives: int
    per_class: dict = field(default_factory=dict)

    def table_row(self) -> str:
        """``mIoU(%) FPs Sensitivity(%)`` as in a results table."""
        return f"{100 * self.miou:.2f} {self.fps_per_volume:.2f} {100 * self.sensitivity:.2f}"

    def to_dict(self) -> dict:
        return {
            "sensitivity": self.sensitivity,
            "fps_per_volume": self.fps_per_volume,
            "miou": self.miou,
            "n_volumes": self.n_volumes,
            "n_lesions": self.n_lesions,
            "n_hits": self.n_hits,
            "n_false_positives": self.n_false_positives,
            "per_class": self.per_class,
        }


def aggregate(results: Sequence[VolumeResult], hit_threshold: float = 0.0,
              miss_as_zero: bool = False) -> MetricsReport:
    """Pool per-volume matches into sensitivity, FPs per volume and mIoU.

    mIoU is the unweighted mean over lesion categories of the mean best IoU
    of that category's lesions. By default only hit lesions count; with
    ``miss_as_zero`` missed lesions contribute an IoU of 0.
    """
    if not results:
        raise DomainError("cannot aggregate an empty result list")
    n_lesions = n_hits = n_fps = 0
    ious_by_class = {c: [] for c in Category}
    lesions_by_class = {c: 0 for c in Category}
    hits_by_class = {c: 0 for c in Category}
    for r in results:
        m = match_volume(r, hit_threshold)
        n_lesions += len(r.gts)
        n_hits += len(m.hits)
        n_fps += len(m.false_positives)
        matched = dict(zip(m.hits, m.matched_ious))
        for g, gt in enumerate(r.gts):
            lesions_by_class[gt.category] += 1
            if g in matched:
                hits_by_class[gt.category] += 1
                ious_by_class[gt.category].append(matched[g])
            elif miss_as_zero:
                ious_by_class[gt.category].append(0.0)
    if n_lesions == 0:
        raise DomainError("sensitivity undefined: no lesions in the results")

    per_class = {}
    class_means = []
    for c in Category:
        vals = ious_by_class[c]
        mean = float(np.mean(vals)) if vals else None
        if mean is not None:
            class_means.append(mean)
        per_class[c.name.lower()] = {
            "n_lesions": lesions_by_class[c],
            "n_hits": hits_by_class[c],
            "sensitivity": hits_by_class[c] / lesions_by_class[c] if lesions_by_class[c] else None,
            "miou": mean,
        }
    return MetricsReport(
        sensitivity=n_hits / n_lesions,
        fps_per_volume=n_fps / len(results),
        miou=float(np.mean(class_means)) if class_means else 0.0,
        n_volumes=len(results),
        n_lesions=n_lesions,
        n_hits=n_hits,
        n_false_positives=n_fps,
        per_class=per_class,
    )


class FrocPoint(NamedTuple):
    threshold: float
    fps_per_volume: float
    sensitivity: float


def filter_by_score(results: Sequence[VolumeResult], threshold: float) -> list[VolumeResult]:
    """Drop detections scoring below ``threshold``."""
    return [replace(r, detections=[d for d in r.detections if d.score >= threshold])
            for r in results]


def froc(results: Sequence[VolumeResult], thresholds: Sequence[float],
         hit_threshold: float = 0.0) -> list[FrocPoint]:
    """One operating point per score threshold (see :func:`filter_by_score`)."""
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    points = []
    for t in thresholds:
        rep = aggregate(filter_by_score(results, t), hit_threshold)
        points.append(FrocPoint(t, rep.fps_per_volume, rep.sensitivity))
    return points


def sensitivity_at_fps(points: Sequence[FrocPoint], max_fps: float) -> Optional[FrocPoint]:
    """Most sensitive operating point whose FPs per volume do not exceed ``max_fps``."""
    ok = [p for p in points if p.fps_per_volume <= max_fps]
    if not ok:
        return None
    return max(ok, key=lambda p: (p.sensitivity, -p.fps_per_volume))


def lesion_volume_cm3(gt: GroundTruth, voxel_spacing: Sequence[float]) -> float:
    b = gt.box
    sx, sy, sz = voxel_spacing
    return b.w * b.h * b.d * sx * sy * sz / 1000.0


class SizeBin(NamedTuple):
    low: float
    high: float
    n_lesions: int
    n_hits: int
    sensitivity: Optional[float]


def size_stratified_sensitivity(results: Sequence[VolumeResult], bin_edges_cm3: Sequence[float],
                                hit_threshold: float = 0.0) -> list[SizeBin]:
    """Sensitivity per lesion-size bin ``(edge[i], edge[i+1]]`` in cm^3.

    Empty bins report ``sensitivity=None``.
    """
    edges = [float(e) for e in bin_edges_cm3]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be ascending with at least two entries")
    counts = [[0, 0] for _ in range(len(edges) - 1)]
    for r in results:
        hits = set(match_volume(r, hit_threshold).hits)
        for g, gt in enumerate(r.gts):
            v = lesion_volume_cm3(gt, r.voxel_spacing)
            for i in range(len(counts)):
                if edges[i] < v <= edges[i + 1]:
                    counts[i][0] += 1
                    counts[i][1] += g in hits
                    break
    return [SizeBin(edges[i], edges[i + 1], n, h, h / n if n else None)
            for i, (n, h) in enumerate(counts)]


def fuse_scores(det_score: float, cls_score: float, w: float = 0.5) -> float:
    """Weighted mix of the detector's and the classifier's score."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"fusion weight must lie in [0, 1], got {w}")
    return w * det_score + (1.0 - w) * cls_score


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if labels.all() or not labels.any():
        raise DomainError("ROC analysis needs both classes")
    return scores, labels


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """False/true positive rates at every distinct threshold, from +inf down to -inf.

    Returns ``(fpr, tpr, thresholds)``; the first point is (0, 0) at +inf and
    the last is (1, 1).
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.zeros(0, dtype=int)
    ends = np.concatenate([distinct, [len(s) - 1]])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    tp = np.concatenate([[0], tp])
    fp = np.concatenate([[0], fp])
    thresholds = np.concatenate([[np.inf], s[ends]])
    return fp / (~labels).sum(), tp / labels.sum(), thresholds


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ends = np.concatenate([np.flatnonzero(np.diff(s)), [len(s) - 1]])
    tp = np.concatenate([[0], np.cumsum(y)[ends]]).astype(np.int64)
    fp = np.concatenate([[0], np.cumsum(~y)[ends]]).astype(np.int64)
    # doubled trapezoid areas in integer counts, divided once at the end
    area2 = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return area2 / (2 * int(labels.sum()) * int((~labels).sum()))


class ClassificationReport(NamedTuple):
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float


def classification_report(scores, labels, threshold: float = 0.5) -> ClassificationReport:
    """Confusion-matrix rates at ``threshold`` (score >= threshold is positive) plus AUC."""
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    tn = int(np.sum(~pred & ~labels))
    return ClassificationReport(
        accuracy=(tp + tn) / len(labels),
        sensitivity=tp / int(labels.sum()),
        specificity=tn / int((~labels).sum()),
        auc=roc_auc(scores, labels),
    )


def lesion_malignancy_scores(results: Sequence[VolumeResult], hit_threshold: float = 0.0):
    """Per hit lesion: the malignancy score of its best-overlapping detection.

    Returns ``(scores, is_malignant)`` arrays. Missed lesions are skipped.
    """
    scores, labels = [], []
    for r in results:
        table = r.iou_table()
        for g, gt in enumerate(r.gts):
            if table.shape[0] == 0:
                continue
            col = table[:, g]
            best = int(col.argmax())
            if col[best] > hit_threshold:
                scores.append(r.detections[best].malignancy)
                labels.append(gt.category == Category.MALIGNANT)
    return np.array(scores, dtype=np.float64), np.array(labels, dtype=bool)
