"""Anchor labelling against ground-truth lesions."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3, ConfigError, iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


class Category(enum.IntEnum):
    BENIGN = 0
    MALIGNANT = 1

    @classmethod
    def parse(cls, value) -> "Category":
        if isinstance(value, Category):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown lesion category {value!r}") from None
        return cls(int(value))


@dataclass(frozen=True)
class GroundTruth:
    box: Box3
    category: Category

    def __post_init__(self):
        object.__setattr__(self, "category", Category.parse(self.category))
        if self.box.is_degenerate:
            raise ValueError(f"ground-truth box must have positive extents: {self.box}")


@dataclass(frozen=True)
class AssignmentConfig:
    positive_iou_threshold: float = 0.2
    negative_iou_threshold: float = 0.1
    force_best_match: bool = True

    def __post_init__(self):
        if not 0.0 <= self.negative_iou_threshold <= self.positive_iou_threshold <= 1.0:
            raise ConfigError(
                "need 0 <= negative_iou_threshold <= positive_iou_threshold <= 1, got "
                f"{self.negative_iou_threshold}, {self.positive_iou_threshold}"
            )


class Label(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


@dataclass(frozen=True)
class AnchorAssignment:
    anchor_index: int
    label: Label
    gt_index: Optional[int]
    iou: float


@dataclass
class Assignments:
    """Array form of an assignment: one entry per anchor.

    ``labels`` holds ``POSITIVE`` / ``NEGATIVE`` / ``IGNORE``; ``gt_index`` is
    -1 except for positives; ``iou`` is the IoU with the matched ground truth
    (0 for negatives, the best IoU for ignored anchors).
    """

    labels: np.ndarray
    gt_index: np.ndarray
    iou: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    def to_list(self) -> list[AnchorAssignment]:
        names = {POSITIVE: Label.POSITIVE, NEGATIVE: Label.NEGATIVE, IGNORE: Label.IGNORE}
        out = []
        for i, (lab, g, iou) in enumerate(zip(self.labels.tolist(), self.gt_index.tolist(),
                                              self.iou.tolist())):
            out.append(AnchorAssignment(i, names[lab], g if lab == POSITIVE else None, iou))
        return out


def assign_anchor_array(anchors: np.ndarray, gt_boxes: np.ndarray,
                        config: AssignmentConfig = AssignmentConfig()) -> Assignments:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    iou = np.zeros(n)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return Assignments(labels, gt_index, iou)

    overlaps = iou_matrix(anchors, gt_boxes)
    # argmax returns the first maximum, so ties go to the lowest gt index
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]

    labels[best_iou < config.negative_iou_threshold] = NEGATIVE
    pos = best_iou > config.positive_iou_threshold
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]
    iou[:] = best_iou

    if config.force_best_match:
        forced = np.zeros(n, dtype=bool)
        for g in range(len(gt_boxes)):
            column = np.where(forced, -1.0, overlaps[:, g])
            a = int(column.argmax())
            if forced[a]:
                # more ground truths than anchors
                continue
            forced[a] = True
            labels[a] = POSITIVE
            gt_index[a] = g
            iou[a] = overlaps[a, g]

    iou[labels == NEGATIVE] = 0.0
    return Assignments(labels, gt_index, iou)


def assign_anchors(anchors: Sequence[Box3], gts: Sequence, config: AssignmentConfig = AssignmentConfig()
                   ) -> list[AnchorAssignment]:
    """Label every anchor positive, negative or ignore.

    An anchor is positive when its best IoU exceeds the positive threshold,
    or when it is some ground truth's best anchor (``force_best_match``).
    It is negative when its IoU with every ground truth is below the negative
    threshold. Boundary values fall to ignore.
    """
    if len(anchors) == 0:
        raise ValueError("anchors must be nonempty")
    arr = np.array([a.to_list() for a in anchors])
    gt_arr = np.array([g.box.to_list() for g in gts]).reshape(-1, 6)
    return assign_anchor_array(arr, gt_arr, config).to_list()
