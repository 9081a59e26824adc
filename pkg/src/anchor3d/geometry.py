"""Axis-aligned 3D box algebra, anchor grids and box regression coding.

Boxes are stored in center-size form ``(cx, cy, cz, w, h, d)`` in voxel
units. Voxel ``i`` covers the continuous interval ``[i, i + 1)`` along its
axis, so a volume of shape ``(X, Y, Z)`` spans ``[0, X] x [0, Y] x [0, Z]``.

Scalar helpers operate on :class:`Box3`; the ``*_boxes`` / ``iou_matrix``
variants operate on ``(N, 6)`` float arrays and are what the training and
inference loops use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class Box3:
    cx: float
    cy: float
    cz: float
    w: float
    h: float
    d: float

    @classmethod
    def from_corners(cls, lo: Sequence[float], hi: Sequence[float]) -> "Box3":
        return cls(
            (lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (lo[2] + hi[2]) / 2,
            hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2],
        )

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box3":
        if len(values) != 6:
            raise ValueError(f"a box needs 6 numbers, got {len(values)}")
        return cls(*(float(v) for v in values))

    def corners(self) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        return (
            (self.cx - self.w / 2, self.cy - self.h / 2, self.cz - self.d / 2),
            (self.cx + self.w / 2, self.cy + self.h / 2, self.cz + self.d / 2),
        )

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.cx, self.cy, self.cz)

    @property
    def size(self) -> tuple[float, float, float]:
        return (self.w, self.h, self.d)

    @property
    def volume(self) -> float:
        return self.w * self.h * self.d

    @property
    def is_degenerate(self) -> bool:
        """True for boxes with a non-positive extent (e.g. clipped away)."""
        return not (self.w > 0 and self.h > 0 and self.d > 0)

    def translate(self, offset: Sequence[float]) -> "Box3":
        return Box3(self.cx + offset[0], self.cy + offset[1], self.cz + offset[2],
                    self.w, self.h, self.d)

    def to_list(self) -> list[float]:
        """JSON form ``[cx, cy, cz, w, h, d]``."""
        return [float(v) for v in (self.cx, self.cy, self.cz, self.w, self.h, self.d)]

    def to_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dz: float
    dw: float
    dh: float
    dd: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dw, self.dh, self.dd])


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor sizes per axis and the feature stride in voxels.

    Every per-axis combination of ``basic_sizes`` is used, so ``n`` sizes give
    ``n**3`` anchors per feature cell (125 for the default five).
    """

    basic_sizes: tuple[float, ...] = (8.0, 16.0, 28.0, 40.0, 55.0)
    stride: tuple[int, int, int] = (16, 16, 16)

    def __post_init__(self):
        sizes = tuple(float(s) for s in self.basic_sizes)
        object.__setattr__(self, "basic_sizes", sizes)
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if not sizes:
            raise ConfigError("basic_sizes must not be empty")
        if any(s <= 0 for s in sizes):
            raise ConfigError("basic_sizes must all be positive")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("basic_sizes must be strictly increasing")
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ConfigError("stride must be three positive integers")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.basic_sizes) ** 3


def iou3d(a: Box3, b: Box3) -> float:
    """Intersection over union of two boxes using continuous volumes."""
    inter = 1.0
    for ca, sa, cb, sb in ((a.cx, a.w, b.cx, b.w), (a.cy, a.h, b.cy, b.h), (a.cz, a.d, b.cz, b.d)):
        lo = max(ca - sa / 2, cb - sb / 2)
        hi = min(ca + sa / 2, cb + sb / 2)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """``(N, 6)`` center-size -> ``(N, 6)`` ``[x1, y1, z1, x2, y2, z2]``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 3:] / 2
    return np.concatenate([boxes[..., :3] - half, boxes[..., :3] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    lo, hi = corners[..., :3], corners[..., 3:]
    return np.concatenate([(lo + hi) / 2, hi - lo], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 6)`` and ``(M, 6)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ca, cb = to_corners(a), to_corners(b)
    lo = np.maximum(ca[:, None, :3], cb[None, :, :3])
    hi = np.minimum(ca[:, None, 3:], cb[None, :, 3:])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    vol_a = np.prod(np.clip(a[:, 3:], 0.0, None), axis=1)
    vol_b = np.prod(np.clip(b[:, 3:], 0.0, None), axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def anchor_array(spec: AnchorSpec, feature_shape: Sequence[int]) -> np.ndarray:
    """Anchors as an ``(n_cells * n**3, 6)`` array.

    Cells are enumerated with x fastest and z slowest; within a cell the size
    triple runs with w fastest, then h, then d. Anchor centers sit at
    ``(cell_index + 0.5) * stride``.
    """
    shape = tuple(int(s) for s in feature_shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ConfigError(f"feature_shape must be three integers >= 1, got {feature_shape}")
    sizes = np.asarray(spec.basic_sizes)
    stride = np.asarray(spec.stride, dtype=np.float64)

    iz, iy, ix = np.meshgrid(np.arange(shape[2]), np.arange(shape[1]), np.arange(shape[0]),
                             indexing="ij")
    centers = (np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1) + 0.5) * stride
    sd, sh, sw = np.meshgrid(sizes, sizes, sizes, indexing="ij")
    whd = np.stack([sw.ravel(), sh.ravel(), sd.ravel()], axis=1)

    n_cells, n_sizes = len(centers), len(whd)
    out = np.empty((n_cells * n_sizes, 6))
    out[:, :3] = np.repeat(centers, n_sizes, axis=0)
    out[:, 3:] = np.tile(whd, (n_cells, 1))
    return out


def generate_anchors(spec: AnchorSpec, feature_shape: Sequence[int]) -> list[Box3]:
    return [Box3(*row) for row in anchor_array(spec, feature_shape).tolist()]


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Regression targets: center shift over anchor size and log size ratio."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors.shape, targets.shape))
    out[..., :3] = (targets[..., :3] - anchors[..., :3]) / anchors[..., 3:]
    out[..., 3:] = np.log(targets[..., 3:] / anchors[..., 3:])
    return out


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors.shape, deltas.shape))
    out[..., :3] = anchors[..., :3] + deltas[..., :3] * anchors[..., 3:]
    out[..., 3:] = anchors[..., 3:] * np.exp(deltas[..., 3:])
    return out


def encode(anchor: Box3, target: Box3) -> BoxDelta:
    return BoxDelta(
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.cz - anchor.cz) / anchor.d,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
        math.log(target.d / anchor.d),
    )


def decode(anchor: Box3, delta: BoxDelta) -> Box3:
    return Box3(
        anchor.cx + delta.dx * anchor.w,
        anchor.cy + delta.dy * anchor.h,
        anchor.cz + delta.dz * anchor.d,
        anchor.w * math.exp(delta.dw),
        anchor.h * math.exp(delta.dh),
        anchor.d * math.exp(delta.dd),
    )


def clip_boxes(boxes: np.ndarray, volume_shape: Sequence[int]) -> np.ndarray:
    """Clamp corner form into ``[0, shape]``. Collapsed axes get extent 0."""
    c = to_corners(boxes)
    upper = np.asarray(volume_shape, dtype=np.float64)
    c[..., :3] = np.clip(c[..., :3], 0.0, upper)
    c[..., 3:] = np.clip(c[..., 3:], 0.0, upper)
    return from_corners(c)


def clip_box(b: Box3, volume_shape: Sequence[int]) -> Box3:
    """Clip a box to the volume; the result may be degenerate (see ``Box3.is_degenerate``)."""
    if len(volume_shape) != 3 or any(int(s) < 1 for s in volume_shape):
        raise ConfigError(f"volume_shape must be three integers >= 1, got {volume_shape}")
    lo, hi = b.corners()
    new_lo, new_hi = [], []
    for l, h, s in zip(lo, hi, volume_shape):
        l2, h2 = min(max(l, 0.0), s), min(max(h, 0.0), s)
        if h2 <= l2:
            return DEGENERATE
        new_lo.append(l2)
        new_hi.append(h2)
    if all(x == y for x, y in zip(new_lo + new_hi, list(lo) + list(hi))):
        return b
    return Box3.from_corners(new_lo, new_hi)


DEGENERATE = Box3(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
"""Marker returned by :func:`clip_box` when nothing of the box remains."""
