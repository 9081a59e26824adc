"""RPN training losses with hand-derived gradients.

Model outputs are plain arrays indexed per anchor:

* ``logits``      ``(N, K+1)`` class scores, column 0 is background
* ``deltas``      ``(N, 6)`` box regression outputs
* ``embeddings``  ``(N, n)`` per-anchor feature vectors

Every loss returns its value together with the gradient with respect to the
outputs it depends on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .assignment import POSITIVE, Assignments
from .geometry import ConfigError, decode_boxes, encode_boxes, iou_matrix

NUM_CLASSES = 3  # background, benign, malignant


class DegenerateBatchError(ValueError):
    """IoU-balance weights are undefined (every weighted term is zero)."""


class DomainError(ValueError):
    """Input outside the domain of a function (zero-norm vector, ...)."""


@dataclass(frozen=True)
class LossParams:
    """Loss hyper-parameters.

    ``iou_source`` picks the IoU that drives the classification reweighting:
    ``"regressed"`` uses the decoded prediction of each positive against its
    ground truth, ``"anchor"`` uses the raw anchor IoU from assignment.
    ``max_similarity_pairs`` caps the number of positive pairs drawn per
    batch (``None`` keeps all of them).
    """

    eta: float = 1.5
    lam: float = 0.7
    pair_gt_iou_threshold: float = 0.3
    pair_anchor_iou_threshold: float = 0.2
    smooth_l1_beta: float = 1.0
    iou_source: str = "regressed"
    max_similarity_pairs: Optional[int] = None

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        for name in ("pair_gt_iou_threshold", "pair_anchor_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.smooth_l1_beta <= 0:
            raise ConfigError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")
        if self.iou_source not in ("regressed", "anchor"):
            raise ConfigError(f"iou_source must be 'regressed' or 'anchor', got {self.iou_source!r}")
        if self.max_similarity_pairs is not None and self.max_similarity_pairs < 1:
            raise ConfigError("max_similarity_pairs must be >= 1 or null")


# ----------------------------------------------------------------------------
# classification
# ----------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits, target_class: int) -> float:
    """``-ln p[target_class]`` computed stably from a logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= target_class < logits.shape[-1]:
        raise ValueError(f"target_class {target_class} out of range")
    return float(-log_softmax(logits)[target_class])


def cross_entropy_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64).reshape(len(targets), -1)
    targets = np.asarray(targets, dtype=np.int64)
    return -log_softmax(logits)[np.arange(len(targets)), targets]


def iou_balance_weights(ious, ces, eta: float) -> np.ndarray:
    """Per-positive weights ``iou**eta * sum(ce) / sum(iou**eta * ce)``.

    The normalisation keeps ``sum(w * ce) == sum(ce)``; with ``eta == 0``
    every weight is 1.
    """
    ious = np.asarray(ious, dtype=np.float64)
    ces = np.asarray(ces, dtype=np.float64)
    if ious.shape != ces.shape or ious.size == 0:
        raise ValueError("ious and ces must be nonempty and the same length")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if np.any(ious < 0) or np.any(ious > 1) or np.any(ces < 0):
        raise ValueError("ious must lie in [0, 1] and ces must be >= 0")
    scaled = np.power(ious, eta)
    denom = float(np.sum(scaled * ces))
    if not denom > 0:
        raise DegenerateBatchError("sum of iou**eta * ce is zero; IoU-balance weights undefined")
    return scaled * (float(np.sum(ces)) / denom)


class ClsLoss(NamedTuple):
    value: float
    grad_pos: np.ndarray
    grad_neg: np.ndarray
    weights: np.ndarray


def iou_balanced_cls_loss(pos_logits, pos_targets, pos_ious, neg_logits, eta: float,
                          weights: Optional[np.ndarray] = None, neg_targets=None) -> ClsLoss:
    """IoU-weighted CE over positives plus plain CE over negatives (raw sum).

    ``weights`` may be passed to freeze the positive weights; gradients always
    treat them as constants.
    """
    pos_logits = np.asarray(pos_logits, dtype=np.float64).reshape(-1, NUM_CLASSES)
    neg_logits = np.asarray(neg_logits, dtype=np.float64).reshape(-1, NUM_CLASSES)
    pos_targets = np.asarray(pos_targets, dtype=np.int64).reshape(-1)
    if neg_targets is None:
        neg_targets = np.zeros(len(neg_logits), dtype=np.int64)

    value = 0.0
    grad_pos = np.zeros_like(pos_logits)
    grad_neg = np.zeros_like(neg_logits)
    if len(pos_logits):
        ce_pos = cross_entropy_rows(pos_logits, pos_targets)
        if weights is None:
            weights = iou_balance_weights(pos_ious, ce_pos, eta)
        weights = np.asarray(weights, dtype=np.float64)
        value += float(np.sum(weights * ce_pos))
        grad_pos = softmax(pos_logits)
        grad_pos[np.arange(len(pos_targets)), pos_targets] -= 1.0
        grad_pos *= weights[:, None]
    else:
        weights = np.zeros(0)
    if len(neg_logits):
        value += float(np.sum(cross_entropy_rows(neg_logits, neg_targets)))
        grad_neg = softmax(neg_logits)
        grad_neg[np.arange(len(neg_targets)), neg_targets] -= 1.0
    return ClsLoss(value, grad_pos, grad_neg, weights)


# ----------------------------------------------------------------------------
# similarity
# ----------------------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _pair_cosines(emb: np.ndarray, pairs: np.ndarray, with_grad: bool = True):
    """Cosines of index pairs plus their gradients w.r.t. both members."""
    a, b = emb[pairs[:, 0]], emb[pairs[:, 1]]
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    if not (na.all() and nb.all()):
        raise DomainError("cosine similarity of a zero-norm embedding")
    cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    if not with_grad:
        return cos, None, None
    da = b / (na * nb)[:, None] - cos[:, None] * a / (na ** 2)[:, None]
    db = a / (na * nb)[:, None] - cos[:, None] * b / (nb ** 2)[:, None]
    return cos, da, db


def similarity_loss_value(s_pp: float, s_pn: float) -> float:
    """``(2 - log(exp(s_pp) / exp(s_pn))) / 4`` with the log/exp cancelled."""
    return (2.0 - (s_pp - s_pn)) / 4.0


class SimLoss(NamedTuple):
    value: float
    grad: np.ndarray
    s_pp: float
    s_pn: float


def similarity_loss(embeddings: np.ndarray, pos_pairs: np.ndarray, neg_pairs: np.ndarray,
                    with_grad: bool = True) -> SimLoss:
    """Similarity loss over index pairs into ``embeddings``.

    Cosines are averaged over each pair list before the loss is applied.
    An empty pair list on either side gives a zero loss and zero gradient.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    pos_pairs = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    neg_pairs = np.asarray(neg_pairs, dtype=np.int64).reshape(-1, 2)
    grad = np.zeros_like(emb)
    if len(pos_pairs) == 0 or len(neg_pairs) == 0:
        return SimLoss(0.0, grad, float("nan"), float("nan"))

    cos_p, da_p, db_p = _pair_cosines(emb, pos_pairs, with_grad)
    cos_n, da_n, db_n = _pair_cosines(emb, neg_pairs, with_grad)
    s_pp, s_pn = float(cos_p.mean()), float(cos_n.mean())
    if not with_grad:
        return SimLoss(similarity_loss_value(s_pp, s_pn), grad, s_pp, s_pn)

    # dL/ds_pp = -1/4, dL/ds_pn = +1/4
    cp = -0.25 / len(pos_pairs)
    cn = 0.25 / len(neg_pairs)
    np.add.at(grad, pos_pairs[:, 0], cp * da_p)
    np.add.at(grad, pos_pairs[:, 1], cp * db_p)
    np.add.at(grad, neg_pairs[:, 0], cn * da_n)
    np.add.at(grad, neg_pairs[:, 1], cn * db_n)
    return SimLoss(similarity_loss_value(s_pp, s_pn), grad, s_pp, s_pn)


def select_similarity_pairs(assignments: Assignments, anchors: np.ndarray, params: LossParams,
                            rng: np.random.Generator):
    """Pick positive anchor pairs and one negative partner per pair.

    A positive pair is two positive anchors whose IoU with their ground truth
    exceeds ``pair_gt_iou_threshold`` and whose mutual IoU exceeds
    ``pair_anchor_iou_threshold``. Each pair ``(i, j)`` gets a negative
    partner ``(i, k)`` with ``k`` drawn uniformly from the negative anchors,
    without replacement when there are enough of them.

    Returns two ``(P, 2)`` integer arrays; both are empty when no pair
    qualifies or there are no negatives.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    if len(anchors) != len(assignments):
        raise ValueError("assignments and anchors must align by index")
    empty = np.zeros((0, 2), dtype=np.int64)

    qualified = np.flatnonzero((assignments.labels == POSITIVE)
                               & (assignments.iou > params.pair_gt_iou_threshold))
    negatives = assignments.negative
    if len(qualified) < 2 or len(negatives) == 0:
        return empty, empty

    mutual = iou_matrix(anchors[qualified], anchors[qualified])
    ii, jj = np.nonzero(np.triu(mutual > params.pair_anchor_iou_threshold, k=1))
    if len(ii) == 0:
        return empty, empty
    pos_pairs = np.stack([qualified[ii], qualified[jj]], axis=1)
    if params.max_similarity_pairs is not None and len(pos_pairs) > params.max_similarity_pairs:
        keep = np.sort(rng.choice(len(pos_pairs), params.max_similarity_pairs, replace=False))
        pos_pairs = pos_pairs[keep]

    replace = len(negatives) < len(pos_pairs)
    partners = negatives[rng.choice(len(negatives), len(pos_pairs), replace=replace)]
    neg_pairs = np.stack([pos_pairs[:, 0], partners], axis=1)
    return pos_pairs, neg_pairs


# ----------------------------------------------------------------------------
# regression
# ----------------------------------------------------------------------------


def smooth_l1(pred, target, beta: float = 1.0):
    """Summed smooth-L1 of ``pred - target`` and its gradient w.r.t. ``pred``."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    x = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ax = np.abs(x)
    quad = ax < beta
    value = float(np.sum(np.where(quad, 0.5 * x * x / beta, ax - 0.5 * beta)))
    grad = np.where(quad, x / beta, np.sign(x))
    return value, grad


# ----------------------------------------------------------------------------
# total objective
# ----------------------------------------------------------------------------


@dataclass
class RPNBatch:
    """Anchors of one volume with their labels and matched ground truths."""

    anchors: np.ndarray
    gt_boxes: np.ndarray
    gt_categories: np.ndarray
    assignments: Assignments

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 6)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 6)
        self.gt_categories = np.asarray(self.gt_categories, dtype=np.int64).reshape(-1)
        self.pos = self.assignments.positive
        self.neg = self.assignments.negative
        matched = self.assignments.gt_index[self.pos]
        # class 0 is background; lesion categories shift by one
        self.pos_targets = self.gt_categories[matched] + 1
        self.pos_gt_boxes = self.gt_boxes[matched]
        self.reg_targets = encode_boxes(self.anchors[self.pos], self.pos_gt_boxes)

    def __len__(self):
        return len(self.anchors)


@dataclass
class LossBundle:
    l_cls: float
    l_reg: float
    l_sim: float
    l_rpn: float
    grad_logits: np.ndarray
    grad_deltas: np.ndarray
    grad_embeddings: np.ndarray
    grad_sim: np.ndarray = field(repr=False)
    cls_weights: np.ndarray = field(repr=False)
    pos_pairs: np.ndarray = field(repr=False)
    neg_pairs: np.ndarray = field(repr=False)
    s_pp: float = float("nan")
    s_pn: float = float("nan")


def total_loss(l_reg: float, l_cls: float, l_sim: float, lam: float) -> float:
    return l_reg + l_cls + lam * l_sim


def positive_ious(batch: RPNBatch, deltas: np.ndarray, params: LossParams) -> np.ndarray:
    """IoU that drives the reweighting of each positive anchor."""
    if params.iou_source == "anchor":
        return batch.assignments.iou[batch.pos]
    boxes = decode_boxes(batch.anchors[batch.pos], np.asarray(deltas)[batch.pos])
    if len(boxes) == 0:
        return np.zeros(0)
    lo = np.maximum(boxes[:, :3] - boxes[:, 3:] / 2, batch.pos_gt_boxes[:, :3] - batch.pos_gt_boxes[:, 3:] / 2)
    hi = np.minimum(boxes[:, :3] + boxes[:, 3:] / 2, batch.pos_gt_boxes[:, :3] + batch.pos_gt_boxes[:, 3:] / 2)
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=1)
    union = np.prod(boxes[:, 3:], axis=1) + np.prod(batch.pos_gt_boxes[:, 3:], axis=1) - inter
    return np.clip(inter / union, 0.0, 1.0)


def rpn_loss(batch: RPNBatch, logits, deltas, embeddings, params: LossParams = LossParams(),
             rng: Optional[np.random.Generator] = None, pairs=None,
             cls_weights: Optional[np.ndarray] = None) -> LossBundle:
    """Composite objective ``l_reg + l_cls + lam * l_sim`` and its gradients.

    ``l_cls`` is the IoU-balanced CE divided by the number of labelled
    anchors; ``l_reg`` is smooth-L1 averaged over positives. Pass ``pairs``
    (positive, negative) and ``cls_weights`` to hold them fixed, e.g. for
    finite-difference checks; otherwise pairs are drawn from ``rng``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(batch)
    if logits.shape != (n, NUM_CLASSES) or deltas.shape != (n, 6) or len(embeddings) != n:
        raise ValueError("model outputs must be indexed per anchor")
    pos, neg = batch.pos, batch.neg

    n_labelled = len(pos) + len(neg)
    if params.eta > 0 and len(pos) and cls_weights is None:
        ious = positive_ious(batch, deltas, params)
    else:
        ious = np.ones(len(pos))
    cls = iou_balanced_cls_loss(logits[pos], batch.pos_targets, ious, logits[neg], params.eta,
                                weights=cls_weights)
    grad_logits = np.zeros_like(logits)
    l_cls = 0.0
    if n_labelled:
        l_cls = cls.value / n_labelled
        grad_logits[pos] = cls.grad_pos / n_labelled
        grad_logits[neg] = cls.grad_neg / n_labelled

    grad_deltas = np.zeros_like(deltas)
    l_reg = 0.0
    if len(pos):
        value, g = smooth_l1(deltas[pos], batch.reg_targets, params.smooth_l1_beta)
        l_reg = value / len(pos)
        grad_deltas[pos] = g / len(pos)

    if pairs is None:
        if rng is None:
            rng = np.random.default_rng(0)
        pairs = select_similarity_pairs(batch.assignments, batch.anchors, params, rng)
    pos_pairs, neg_pairs = pairs
    sim = similarity_loss(embeddings, pos_pairs, neg_pairs)

    l_rpn = total_loss(l_reg, l_cls, sim.value, params.lam)
    if not math.isfinite(l_rpn):
        raise FloatingPointError("non-finite RPN loss")
    return LossBundle(
        l_cls=l_cls, l_reg=l_reg, l_sim=sim.value, l_rpn=l_rpn,
        grad_logits=grad_logits, grad_deltas=grad_deltas,
        grad_embeddings=params.lam * sim.grad, grad_sim=sim.grad,
        cls_weights=cls.weights, pos_pairs=np.asarray(pos_pairs), neg_pairs=np.asarray(neg_pairs),
        s_pp=sim.s_pp, s_pn=sim.s_pn,
    )
