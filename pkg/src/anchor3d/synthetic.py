"""Synthetic volumes and a linear stand-in for the detection network.

The generator places bright ellipsoidal lesions in a noisy background.
Benign lesions are smooth ellipsoids; malignant ones have a perturbed,
lobulated boundary. Anchor features are box statistics computed in O(1) per
anchor from 3D summed-area tables, and :class:`ToyScorer` maps them
linearly to class logits, box deltas and an embedding.

Feature layout (``FEATURE_NAMES``), all over the anchor's clipped region:

====  ==================================================================
0     mean intensity
1     intensity variance
2     mean of the central half-size box minus mean of the surrounding shell
3     mean gradient magnitude of the smoothed volume
4     foreground fraction (smoothed intensity above the threshold)
5-7   foreground centroid offset from the anchor centre / anchor size
8-10  log(foreground extent / anchor size), extent = 2 * sqrt(5 * var)
11-13 absolute values of 5-7
14-16 absolute values of 8-10
17-19 log2(anchor size / 16)
20    boundary voxels / foreground voxels ** (2/3)
====  ==================================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .assignment import POSITIVE, AssignmentConfig, Category, GroundTruth, assign_anchor_array
from .geometry import AnchorSpec, Box3, ConfigError, anchor_array, clip_boxes, decode_boxes
from .inference import Detection, PipelineConfig, run_inference, tile_volume
from .losses import (
    NUM_CLASSES,
    DegenerateBatchError,
    LossParams,
    RPNBatch,
    rpn_loss,
    select_similarity_pairs,
    softmax,
)
from .metrics import (
    ClassificationReport,
    MetricsReport,
    aggregate,
    classification_report,
    fuse_scores,
    lesion_malignancy_scores,
)

FEATURE_NAMES = (
    "mean", "variance", "contrast", "gradient", "fg_fraction",
    "offset_x", "offset_y", "offset_z",
    "log_extent_x", "log_extent_y", "log_extent_z",
    "abs_offset_x", "abs_offset_y", "abs_offset_z",
    "abs_log_extent_x", "abs_log_extent_y", "abs_log_extent_z",
    "log_size_x", "log_size_y", "log_size_z",
    "roughness",
)
FEATURE_DIM = len(FEATURE_NAMES)

DESK_ANCHORS = AnchorSpec(basic_sizes=(8.0, 12.0, 18.0), stride=(8, 8, 8))
# 1/8-volume downsample of the clinical scans is 1/2 per axis; desk scale is a
# further 1/4, so spacing grows 8x over the raw (0.511, 0.082, 0.200) mm.
DESK_SPACING = (4.088, 0.656, 1.6)


class GenerationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    volume_shape: tuple[int, int, int] = (80, 24, 80)
    lesions_per_volume: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (3.0, 7.0)
    background_mean: float = 0.0
    foreground_mean: float = 1.0
    noise_std: float = 0.25
    malignant_fraction: float = 0.5
    roughness: float = 0.35
    voxel_spacing: tuple[float, float, float] = DESK_SPACING
    seed: int = 0

    def __post_init__(self):
        for name in ("volume_shape", "lesions_per_volume"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("lesion_radius_range", "voxel_spacing"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        lo, hi = self.lesions_per_volume
        if not 0 <= lo <= hi:
            raise ConfigError("lesions_per_volume must be an ascending non-negative range")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ConfigError("lesion_radius_range must be an ascending positive range")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 <= self.roughness < 1.0:
            raise ConfigError("roughness must lie in [0, 1)")
        if not 0.0 <= self.malignant_fraction <= 1.0:
            raise ConfigError("malignant_fraction must lie in [0, 1]")
        if any(s <= 0 for s in self.voxel_spacing):
            raise ConfigError("voxel_spacing must be positive")
        reach = 2 * rhi * (1 + self.roughness) + 2
        if any(reach > s for s in self.volume_shape):
            raise ConfigError(f"lesions up to radius {rhi} do not fit in {self.volume_shape}")

    @property
    def threshold(self) -> float:
        return (self.background_mean + self.foreground_mean) / 2


def _voxel_centers(shape):
    return [np.arange(n, dtype=np.float64) + 0.5 for n in shape]


def rasterize_lesion(shape, center, radii, rng: Optional[np.random.Generator] = None,
                     roughness: float = 0.0) -> np.ndarray:
    """Boolean mask of an ellipsoid, optionally with a lobulated boundary.

    Voxel ``i`` is inside when its centre ``i + 0.5`` lies inside the surface.
    """
    xs, ys, zs = _voxel_centers(shape)
    u = (xs[:, None, None] - center[0]) / radii[0]
    v = (ys[None, :, None] - center[1]) / radii[1]
    w = (zs[None, None, :] - center[2]) / radii[2]
    rho = np.sqrt(u * u + v * v + w * w)
    if roughness > 0 and rng is not None:
        theta = np.arccos(np.clip(w / np.maximum(rho, 1e-12), -1, 1))
        phi = np.arctan2(v, u)
        k1, k2 = rng.integers(3, 6, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        bumps = np.sin(k1 * theta + p1) * np.cos(k2 * phi + p2)
        limit = 1.0 + roughness * bumps
    else:
        limit = 1.0
    return rho <= limit


def mask_bounding_box(mask: np.ndarray) -> Box3:
    idx = np.nonzero(mask)
    lo = [float(a.min()) for a in idx]
    hi = [float(a.max()) + 1.0 for a in idx]
    return Box3.from_corners(lo, hi)


def generate_volume(spec: SyntheticSpec, seed: Optional[int] = None):
    """One synthetic volume and its lesions.

    Returns ``(volume, gts)`` where ``volume`` is a float32 array indexed
    ``[x, y, z]``. Identical ``(spec, seed)`` give bitwise-identical output.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    shape = spec.volume_shape
    n_lesions = int(rng.integers(spec.lesions_per_volume[0], spec.lesions_per_volume[1] + 1))
    label = np.zeros(shape, dtype=bool)
    gts: list[GroundTruth] = []
    taken: list[np.ndarray] = []

    for _ in range(n_lesions):
        malignant = bool(rng.random() < spec.malignant_fraction)
        for _attempt in range(200):
            radii = rng.uniform(*spec.lesion_radius_range, size=3)
            reach = radii * (1 + (spec.roughness if malignant else 0.0)) + 1
            if np.any(2 * reach > np.asarray(shape)):
                continue
            center = np.array([rng.uniform(r, s - r) for r, s in zip(reach, shape)])
            lo, hi = center - reach, center + reach
            if all(np.any(hi <= t[:3]) or np.any(lo >= t[3:]) for t in taken):
                break
        else:
            raise GenerationError(f"could not place lesion {len(gts) + 1} of {n_lesions} in {shape}")
        mask = rasterize_lesion(shape, center, radii, rng, spec.roughness if malignant else 0.0)
        if not mask.any():
            raise GenerationError("lesion rasterised to an empty mask")
        taken.append(np.concatenate([lo, hi]))
        label |= mask
        gts.append(GroundTruth(mask_bounding_box(mask),
                               Category.MALIGNANT if malignant else Category.BENIGN))

    volume = np.where(label, spec.foreground_mean, spec.background_mean)
    if spec.noise_std > 0:
        volume = volume + rng.normal(0.0, spec.noise_std, size=shape)
    return volume.astype(np.float32), gts


def dataset_seeds(base: int, count: int) -> list[int]:
    """Per-volume seeds derived from one base seed."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    return [int(s) for s in np.random.SeedSequence(base).generate_state(max(count, 1), dtype=np.uint32)[:count]]


def generate_dataset(spec: SyntheticSpec, count: int, seed: Optional[int] = None):
    """``count`` volumes with per-volume seeds derived from one base seed."""
    return [generate_volume(spec, s) for s in dataset_seeds(spec.seed if seed is None else seed, count)]


# ----------------------------------------------------------------------------
# features
# ----------------------------------------------------------------------------


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(s + 1 for s in a.shape))
    out[1:, 1:, 1:] = a.cumsum(0).cumsum(1).cumsum(2)
    return out


class VolumeFeatures:
    """Summed-area tables for fast per-box statistics of one volume."""

    def __init__(self, volume, threshold: float = 0.5, smoothing: float = 1.0,
                 background_level: float = 0.0):
        vol = np.asarray(volume, dtype=np.float64)
        if vol.ndim != 3:
            raise ValueError("volume must be 3D")
        self.shape = vol.shape
        self.background_level = background_level
        smooth = ndimage.gaussian_filter(vol, smoothing) if smoothing > 0 else vol
        mask = smooth > threshold
        grad = np.sqrt(sum(g * g for g in np.gradient(smooth)))
        boundary = mask & ~ndimage.binary_erosion(mask, border_value=1)
        xs, ys, zs = _voxel_centers(vol.shape)
        x, y, z = xs[:, None, None], ys[None, :, None], zs[None, None, :]
        m = mask.astype(np.float64)
        tables = [vol, vol * vol, grad, m, m * x, m * y, m * z, m * x * x, m * y * y, m * z * z,
                  boundary.astype(np.float64)]
        self._tables = np.stack([_integral(t) for t in tables])

    def _sums(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        T = self._tables
        x0, y0, z0 = lo.T
        x1, y1, z1 = hi.T
        return (T[:, x1, y1, z1] - T[:, x0, y1, z1] - T[:, x1, y0, z1] - T[:, x1, y1, z0]
                + T[:, x0, y0, z1] + T[:, x0, y1, z0] + T[:, x1, y0, z0] - T[:, x0, y0, z0])

    def _region(self, centers, sizes, scale=1.0):
        upper = np.asarray(self.shape)
        lo = np.clip(np.rint(centers - scale * sizes / 2), 0, upper).astype(np.int64)
        hi = np.clip(np.rint(centers + scale * sizes / 2), 0, upper).astype(np.int64)
        hi = np.maximum(hi, lo)
        return lo, hi

    def extract(self, boxes: np.ndarray) -> np.ndarray:
        """``(N, FEATURE_DIM)`` features for ``(N, 6)`` boxes."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
        c, s = boxes[:, :3], boxes[:, 3:]
        lo, hi = self._region(c, s)
        count = np.prod(hi - lo, axis=1).astype(np.float64)
        S = self._sums(lo, hi)
        ilo, ihi = self._region(c, s, 0.5)
        ilo, ihi = np.maximum(ilo, lo), np.minimum(np.maximum(ihi, ilo), hi)
        icount = np.prod(np.maximum(ihi - ilo, 0), axis=1).astype(np.float64)
        inner = self._sums(ilo, np.maximum(ihi, ilo))[0]

        out = np.zeros((len(boxes), FEATURE_DIM))
        out[:, 0] = self.background_level
        out[:, 17:20] = np.log2(s / 16.0)
        ok = count > 0
        n = np.where(ok, count, 1.0)
        mean = S[0] / n
        out[ok, 0] = mean[ok]
        out[ok, 1] = np.maximum(S[1] / n - mean ** 2, 0.0)[ok]
        shell = count - icount
        has_shell = ok & (icount > 0) & (shell > 0)
        contrast = inner / np.maximum(icount, 1) - (S[0] - inner) / np.maximum(shell, 1)
        out[has_shell, 2] = contrast[has_shell]
        out[ok, 3] = (S[2] / n)[ok]
        out[ok, 4] = (S[3] / n)[ok]

        fg = S[3]
        has_fg = fg > 0
        nf = np.where(has_fg, fg, 1.0)
        centroid = S[4:7] / nf
        offset = (centroid.T - c) / s
        out[has_fg, 5:8] = offset[has_fg]
        var = np.maximum(S[7:10] / nf - centroid ** 2, 0.0).T
        extent = 2.0 * np.sqrt(5.0 * var + 1.0 / 12.0)
        log_ext = np.clip(np.log(extent / s), -3.0, 3.0)
        out[has_fg, 8:11] = log_ext[has_fg]
        out[:, 11:14] = np.abs(out[:, 5:8])
        out[:, 14:17] = np.abs(out[:, 8:11])
        out[has_fg, 20] = (S[10] / nf ** (2.0 / 3.0))[has_fg]
        return out


def extract_features(volume, anchor: Box3, threshold: float = 0.5) -> np.ndarray:
    return VolumeFeatures(volume, threshold).extract(anchor.to_array()[None])[0]


# ----------------------------------------------------------------------------
# scorer
# ----------------------------------------------------------------------------


@dataclass
class ToyScorer:
    """Linear heads over standardised anchor features."""

    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray
    w_emb: np.ndarray
    b_emb: np.ndarray
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))

    @classmethod
    def zeros(cls, emb_dim: int = 64, feature_dim: int = FEATURE_DIM) -> "ToyScorer":
        return cls(np.zeros((feature_dim, NUM_CLASSES)), np.zeros(NUM_CLASSES),
                   np.zeros((feature_dim, 6)), np.zeros(6),
                   np.zeros((feature_dim, emb_dim)), np.zeros(emb_dim),
                   np.zeros(feature_dim), np.ones(feature_dim))

    @classmethod
    def initialise(cls, emb_dim: int = 64, seed: int = 0, feature_dim: int = FEATURE_DIM) -> "ToyScorer":
        """Zero class/box heads and a random embedding head."""
        s = cls.zeros(emb_dim, feature_dim)
        rng = np.random.default_rng(seed)
        s.w_emb = rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(feature_dim, emb_dim))
        return s

    @property
    def emb_dim(self) -> int:
        return self.w_emb.shape[1]

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in (self.w_cls, self.b_cls, self.w_reg, self.b_reg, self.w_emb, self.b_emb))

    def standardise(self, features: np.ndarray) -> np.ndarray:
        return (features - self.feature_mean) / self.feature_std

    def forward(self, features: np.ndarray):
        x = self.standardise(features)
        return x @ self.w_cls + self.b_cls, x @ self.w_reg + self.b_reg, x @ self.w_emb + self.b_emb

    def copy(self) -> "ToyScorer":
        return ToyScorer(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    def to_dict(self) -> dict:
        return {f: np.asarray(getattr(self, f)).tolist() for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyScorer":
        return cls(**{f: np.asarray(d[f], dtype=np.float64) for f in cls.__dataclass_fields__})


@dataclass
class ToyClassifier:
    """Logistic malignancy classifier (second stage).

    Features are taken over the candidate box enlarged by ``context`` so that
    lobes cut off by an imprecise box still count.
    """

    weights: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    bias: float = 0.0
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))
    context: float = 1.5

    def box_features(self, vf: VolumeFeatures, boxes: np.ndarray) -> np.ndarray:
        boxes = np.array(boxes, dtype=np.float64).reshape(-1, 6)
        boxes[:, 3:] *= self.context
        return vf.extract(boxes)

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features) - self.feature_mean) / self.feature_std
        return 1.0 / (1.0 + np.exp(-(x @ self.weights + self.bias)))

    def predict_boxes(self, vf: VolumeFeatures, boxes: np.ndarray) -> np.ndarray:
        return self.predict(self.box_features(vf, boxes))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias,
                "feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
                "context": self.context}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyClassifier":
        return cls(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]),
                   np.asarray(d["feature_mean"], dtype=np.float64),
                   np.asarray(d["feature_std"], dtype=np.float64), float(d.get("context", 1.5)))


def feature_shape_for(volume_shape, spec: AnchorSpec) -> tuple[int, int, int]:
    return tuple(max(1, int(v) // s) for v, s in zip(volume_shape, spec.stride))


@dataclass
class PreparedVolume:
    features: np.ndarray
    batch: RPNBatch


def prepare_volume(volume, gts, anchor_spec: AnchorSpec, assign_config: AssignmentConfig,
                   threshold: float = 0.5) -> PreparedVolume:
    anchors = anchor_array(anchor_spec, feature_shape_for(np.shape(volume), anchor_spec))
    feats = VolumeFeatures(volume, threshold).extract(anchors)
    gt_boxes = np.array([g.box.to_list() for g in gts]).reshape(-1, 6)
    cats = np.array([int(g.category) for g in gts], dtype=np.int64)
    batch = RPNBatch(anchors, gt_boxes, cats, assign_anchor_array(anchors, gt_boxes, assign_config))
    return PreparedVolume(feats, batch)


def _fit_standardisation(prepared: Sequence[PreparedVolume]):
    """Feature mean/std with positives and the rest weighted half each.

    Positives are rare; plain statistics would leave them as extreme outliers
    and make the regression head ill-conditioned for gradient descent.
    """
    allf = np.concatenate([p.features for p in prepared])
    pos = np.concatenate([p.batch.assignments.labels == POSITIVE for p in prepared])
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == len(pos):
        w = np.full(len(pos), 1.0 / len(pos))
    else:
        w = np.where(pos, 0.5 / n_pos, 0.5 / (len(pos) - n_pos))
    mean = w @ allf
    std = np.sqrt(w @ (allf - mean) ** 2)
    return mean, np.where(std > 1e-6, std, 1.0)


def train_toy(dataset, scorer: ToyScorer, params: LossParams = LossParams(), steps: int = 500,
              learning_rate: float = 0.2, seed: int = 0, anchor_spec: AnchorSpec = DESK_ANCHORS,
              assign_config: AssignmentConfig = AssignmentConfig(), volumes_per_step: int = 4,
              threshold: float = 0.5, prepared: Optional[list[PreparedVolume]] = None):
    """Plain gradient descent on the composite RPN loss.

    ``dataset`` is a sequence of ``(volume, gts)``. Each step averages the
    loss over ``volumes_per_step`` volumes drawn without replacement.
    Returns the trained copy of ``scorer`` and a per-step history of loss
    components.
    """
    if steps < 0 or learning_rate <= 0:
        raise ValueError("steps must be >= 0 and learning_rate > 0")
    scorer = scorer.copy()
    history: list[dict] = []
    if steps == 0:
        return scorer, history
    if prepared is None:
        if not dataset:
            raise ValueError("dataset must be nonempty")
        prepared = [prepare_volume(v, g, anchor_spec, assign_config, threshold) for v, g in dataset]
    if not np.any(scorer.feature_std != 1.0) and not np.any(scorer.feature_mean):
        scorer.feature_mean, scorer.feature_std = _fit_standardisation(prepared)
    xs = [scorer.standardise(p.features) for p in prepared]

    rng = np.random.default_rng(seed)
    k = min(volumes_per_step, len(prepared))
    for step in range(steps):
        chosen = np.sort(rng.choice(len(prepared), k, replace=False))
        grads = [np.zeros_like(a) for a in (scorer.w_cls, scorer.b_cls, scorer.w_reg,
                                            scorer.b_reg, scorer.w_emb, scorer.b_emb)]
        record = {"l_rpn": 0.0, "l_cls": 0.0, "l_reg": 0.0, "l_sim": 0.0, "degenerate": 0}
        for i in chosen:
            x = xs[i]
            logits = x @ scorer.w_cls + scorer.b_cls
            deltas = x @ scorer.w_reg + scorer.b_reg
            emb = x @ scorer.w_emb + scorer.b_emb
            try:
                b = rpn_loss(prepared[i].batch, logits, deltas, emb, params, rng=rng)
            except DegenerateBatchError:
                # every regressed positive missed its lesion: unit weights for this volume
                b = rpn_loss(prepared[i].batch, logits, deltas, emb, replace(params, eta=0.0), rng=rng)
                record["degenerate"] += 1
            for g, (w_grad, b_grad) in zip(
                    (0, 2, 4), ((b.grad_logits,) * 2, (b.grad_deltas,) * 2, (b.grad_embeddings,) * 2)):
                grads[g] += x.T @ w_grad
                grads[g + 1] += b_grad.sum(axis=0)
            for key in ("l_rpn", "l_cls", "l_reg", "l_sim"):
                record[key] += getattr(b, key) / k
        if not all(math.isfinite(v) for v in record.values()):
            raise TrainingError(f"non-finite loss at step {step}")
        scorer.w_cls -= learning_rate * grads[0] / k
        scorer.b_cls -= learning_rate * grads[1] / k
        scorer.w_reg -= learning_rate * grads[2] / k
        scorer.b_reg -= learning_rate * grads[3] / k
        scorer.w_emb -= learning_rate * grads[4] / k
        scorer.b_emb -= learning_rate * grads[5] / k
        history.append({"step": step, **record})
    return scorer, history


def mean_positive_cosine(scorer: ToyScorer, prepared: Sequence[PreparedVolume], params: LossParams,
                         seed: int = 0) -> float:
    """Mean embedding cosine over the qualifying positive anchor pairs."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for p in prepared:
        pos_pairs, _ = select_similarity_pairs(p.batch.assignments, p.batch.anchors, params, rng)
        if len(pos_pairs) == 0:
            continue
        emb = scorer.forward(p.features)[2]
        a, b = emb[pos_pairs[:, 0]], emb[pos_pairs[:, 1]]
        cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        total += float(cos.sum())
        count += len(cos)
    return total / count if count else float("nan")


def train_classifier(dataset, steps: int = 300, learning_rate: float = 0.5, seed: int = 0,
                     jitter: float = 0.15, copies: int = 8, threshold: float = 0.5,
                     context: float = 1.5) -> ToyClassifier:
    """Fit the malignancy classifier on jittered ground-truth boxes."""
    rng = np.random.default_rng(seed)
    clf = ToyClassifier(context=context)
    feats, labels = [], []
    for volume, gts in dataset:
        if not gts:
            continue
        vf = VolumeFeatures(volume, threshold)
        for gt in gts:
            base = gt.box.to_array()
            boxes = np.repeat(base[None], copies, axis=0)
            boxes[1:, :3] += rng.normal(0, jitter, size=(copies - 1, 3)) * base[3:]
            boxes[1:, 3:] *= np.exp(rng.normal(0, jitter, size=(copies - 1, 3)))
            feats.append(clf.box_features(vf, boxes))
            labels.extend([float(gt.category == Category.MALIGNANT)] * copies)
    if not feats:
        return clf
    f = np.concatenate(feats)
    y = np.asarray(labels)
    clf.feature_mean = f.mean(axis=0)
    std = f.std(axis=0)
    clf.feature_std = np.where(std > 1e-6, std, 1.0)
    x = (f - clf.feature_mean) / clf.feature_std
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x @ clf.weights + clf.bias)))
        g = p - y
        clf.weights = clf.weights - learning_rate * (x.T @ g) / len(y)
        clf.bias = clf.bias - learning_rate * float(g.mean())
    return clf


# ----------------------------------------------------------------------------
# end-to-end evaluation
# ----------------------------------------------------------------------------


def score_patch(scorer: ToyScorer, patch, anchor_spec: AnchorSpec = DESK_ANCHORS,
                pre_nms_top_n: int = 200, threshold: float = 0.5) -> list[Detection]:
    """Score every anchor of one patch; return the top candidates in patch coordinates."""
    patch = np.asarray(patch)
    anchors = anchor_array(anchor_spec, feature_shape_for(patch.shape, anchor_spec))
    feats = VolumeFeatures(patch, threshold).extract(anchors)
    logits, deltas, emb = scorer.forward(feats)
    probs = softmax(logits)
    fg = 1.0 - probs[:, 0]
    order = np.argsort(-fg, kind="stable")[:pre_nms_top_n]
    boxes = clip_boxes(decode_boxes(anchors[order], np.clip(deltas[order], -4.0, 4.0)), patch.shape)
    dets = []
    for j, i in enumerate(order.tolist()):
        lesion = probs[i, 1:]
        total = lesion.sum()
        cp = (float(lesion[0] / total), float(lesion[1] / total)) if total > 0 else (0.5, 0.5)
        dets.append(Detection(Box3(*boxes[j].tolist()), float(np.clip(fg[i], 0.0, 1.0)),
                              (cp[0], 1.0 - cp[0]), emb[i]))
    return dets


def detect_volume(scorer: ToyScorer, volume, config: PipelineConfig, anchor_spec: AnchorSpec = DESK_ANCHORS,
                  gts=None, volume_id: str = "", voxel_spacing=DESK_SPACING,
                  classifier: Optional[ToyClassifier] = None, fusion_weight: float = 0.5,
                  pre_nms_top_n: int = 200, threshold: float = 0.5):
    """Tile, score, merge and (optionally) re-score one volume; returns a ``VolumeResult``."""
    volume = np.asarray(volume)
    per_patch = []
    for origin in tile_volume(volume.shape, config.patch_shape, config.tile_min_slack):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, config.patch_shape))
        per_patch.append((origin, score_patch(scorer, volume[sl], anchor_spec, pre_nms_top_n, threshold)))
    result = run_inference(per_patch, config, gts, volume_id, voxel_spacing)
    if classifier is not None and result.detections:
        boxes = np.array([d.box.to_list() for d in result.detections])
        cls_scores = classifier.predict_boxes(VolumeFeatures(volume, threshold), boxes)
        for d, c in zip(result.detections, cls_scores.tolist()):
            m = fuse_scores(d.class_probs[1], c, fusion_weight)
            d.class_probs = (1.0 - m, m)
    return result


def evaluate_toy(scorer: ToyScorer, test_set, config: PipelineConfig,
                 anchor_spec: AnchorSpec = DESK_ANCHORS, classifier: Optional[ToyClassifier] = None,
                 fusion_weight: float = 0.5, voxel_spacing=DESK_SPACING, pre_nms_top_n: int = 200
                 ) -> tuple[MetricsReport, Optional[ClassificationReport], list]:
    """Detection report, lesion classification report and the per-volume results.

    The classification report covers hit lesions, scored by the fused
    malignancy of their best-overlapping detection; it is ``None`` when the
    hit lesions do not include both categories.
    """
    results = [
        detect_volume(scorer, vol, config, anchor_spec, gts, f"vol{i:04d}", voxel_spacing,
                      classifier, fusion_weight, pre_nms_top_n)
        for i, (vol, gts) in enumerate(test_set)
    ]
    report = aggregate(results)
    scores, labels = lesion_malignancy_scores(results)
    cls = None
    if labels.any() and not labels.all():
        cls = classification_report(scores, labels, 0.5)
    return report, cls, results
