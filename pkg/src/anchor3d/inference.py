"""Test-time pipeline: patch tiling, NMS, size filtering and merging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3, ConfigError, iou3d, iou_matrix


@dataclass
class Detection:
    box: Box3
    score: float
    class_probs: Optional[tuple[float, float]] = None
    embedding: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    max_iou: Optional[float] = None
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_probs is not None:
            self.class_probs = tuple(float(p) for p in self.class_probs)
            if len(self.class_probs) != 2 or abs(sum(self.class_probs) - 1.0) > 1e-9:
                raise ValueError(f"class_probs must be two values summing to 1, got {self.class_probs}")

    @property
    def malignancy(self) -> float:
        return self.class_probs[1] if self.class_probs is not None else float("nan")


@dataclass(frozen=True)
class PipelineConfig:
    """Test-time settings.

    ``tile_min_slack`` is the fraction of the patch length below which an
    axis is not tiled twice; the single window is centred instead.
    ``score_threshold`` drops detections scoring below it before the final
    NMS (0 keeps everything).
    """

    patch_shape: tuple[int, int, int] = (320, 96, 320)
    per_patch_top_k: int = 3
    nms_iou_threshold: float = 0.1
    min_volume: float = 0.0
    max_volume: float = math.inf
    tile_min_slack: float = 0.05
    score_threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        if len(self.patch_shape) != 3 or any(s < 1 for s in self.patch_shape):
            raise ConfigError(f"patch_shape must be three positive integers, got {self.patch_shape}")
        if self.per_patch_top_k < 1:
            raise ConfigError("per_patch_top_k must be >= 1")
        if not 0.0 < self.nms_iou_threshold < 1.0:
            raise ConfigError(f"nms_iou_threshold must lie in (0, 1), got {self.nms_iou_threshold}")
        if not self.min_volume < self.max_volume:
            raise ConfigError("min_volume must be below max_volume")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score_threshold must lie in [0, 1]")


def tile_volume(volume_shape: Sequence[int], patch_shape: Sequence[int],
                min_slack: float = 0.05) -> list[tuple[int, int, int]]:
    """Patch origins of a regular grid over the volume.

    Per axis: one origin at 0 when the patch spans the axis; one centred
    origin when the leftover is at most ``min_slack * patch``; otherwise
    ``ceil(volume / patch)`` origins evenly spaced from 0 to
    ``volume - patch``. Origins are listed with x fastest, then y, then z.
    """
    if len(volume_shape) != 3 or len(patch_shape) != 3:
        raise ConfigError("shapes must have three components")
    per_axis = []
    for v, p in zip(volume_shape, patch_shape):
        v, p = int(v), int(p)
        if p > v:
            raise ConfigError(f"patch {tuple(patch_shape)} larger than volume {tuple(volume_shape)}")
        slack = v - p
        if slack == 0:
            per_axis.append([0])
        elif slack <= min_slack * p:
            per_axis.append([slack // 2])
        else:
            n = math.ceil(v / p)
            per_axis.append(sorted({round(i * slack / (n - 1)) for i in range(n)}))
    return [(x, y, z) for z in per_axis[2] for y in per_axis[1] for x in per_axis[0]]


def patch_to_volume(det: Detection, origin: Sequence[int]) -> Detection:
    return replace(det, box=det.box.translate(origin))


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy NMS: keep the best remaining box, drop those with IoU above threshold.

    Output is in descending score order; equal scores keep input order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([d.box.to_list() for d in dets])[order]
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= overlaps[i, i + 1:] <= iou_threshold
    return [dets[k] for k in keep]


def size_filter(dets: Sequence[Detection], min_volume: float, max_volume: float) -> list[Detection]:
    if not min_volume < max_volume:
        raise ValueError("min_volume must be below max_volume")
    return [d for d in dets
            if not d.box.is_degenerate and min_volume <= d.box.volume <= max_volume]


def annotate_max_iou(dets: Sequence[Detection], gts: Sequence) -> list[Detection]:
    out = []
    for d in dets:
        best = max((iou3d(d.box, g.box) for g in gts), default=0.0)
        out.append(replace(d, max_iou=best))
    return out


def run_inference(per_patch_dets, config: PipelineConfig = PipelineConfig(), gts=None,
                  volume_id: str = "", voxel_spacing=(1.0, 1.0, 1.0)):
    """Merge per-patch detections into final volume detections.

    ``per_patch_dets`` is a sequence of ``(origin, detections)`` with boxes in
    patch coordinates. Order: per-patch NMS, top-k, shift to volume
    coordinates, pool, size filter, score threshold, final NMS, and the
    max-IoU annotation when ``gts`` is given.
    """
    from .metrics import VolumeResult

    pooled = []
    for origin, dets in per_patch_dets:
        kept = nms(list(dets), config.nms_iou_threshold)[: config.per_patch_top_k]
        pooled.extend(patch_to_volume(d, origin) for d in kept)
    pooled = size_filter(pooled, config.min_volume, config.max_volume)
    pooled = [d for d in pooled if d.score >= config.score_threshold]
    final = nms(pooled, config.nms_iou_threshold)
    if gts is not None:
        gts = list(gts)
        final = annotate_max_iou(final, gts)
    return VolumeResult(volume_id, gts or [], final, tuple(voxel_spacing))
