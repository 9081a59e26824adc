"""Central finite-difference checks for the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .assignment import AssignmentConfig, assign_anchor_array
from .losses import (
    NUM_CLASSES,
    LossParams,
    RPNBatch,
    iou_balanced_cls_loss,
    rpn_loss,
    similarity_loss,
    smooth_l1,
)

LOSS_NAMES = ("l_cls", "l_reg", "l_sim", "l_rpn")


@dataclass
class GradCheckResult:
    loss: str
    worst_rel_error: float
    worst_index: int
    passed: bool


def random_batch(rng: np.random.Generator, n_anchors: int = 24, emb_dim: int = 8):
    """A small labelled batch with outputs: anchors jittered around 1-3 lesions.

    Returns ``(batch, logits, deltas, embeddings)``.
    """
    n_gt = int(rng.integers(1, 4))
    gt = np.empty((n_gt, 6))
    gt[:, :3] = rng.uniform(20, 60, size=(n_gt, 3))
    gt[:, 3:] = rng.uniform(6, 16, size=(n_gt, 3))
    cats = rng.integers(0, 2, size=n_gt)

    n_near = n_anchors // 2
    src = gt[rng.integers(0, n_gt, size=n_near)]
    near = src.copy()
    near[:, :3] += rng.normal(0, 0.15, size=(n_near, 3)) * src[:, 3:]
    near[:, 3:] *= np.exp(rng.normal(0, 0.2, size=(n_near, 3)))
    far = np.empty((n_anchors - n_near, 6))
    far[:, :3] = rng.uniform(0, 80, size=(len(far), 3))
    far[:, 3:] = rng.uniform(4, 20, size=(len(far), 3))
    anchors = np.concatenate([near, far])

    batch = RPNBatch(anchors, gt, cats, assign_anchor_array(anchors, gt, AssignmentConfig()))
    logits = rng.normal(0, 2, size=(n_anchors, NUM_CLASSES))
    deltas = rng.normal(0, 0.8, size=(n_anchors, 6))
    embeddings = rng.normal(0, 1, size=(n_anchors, emb_dim))
    return batch, logits, deltas, embeddings


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def compare(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float):
    """Worst relative error and whether every entry is within ``rtol`` or ``atol``."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0, -1, True
    diff = np.abs(a - n)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    ok = (diff <= atol) | (rel <= rtol)
    i = int(rel.argmax())
    return float(rel[i]), i, bool(ok.all())


def check_batch(batch: RPNBatch, logits, deltas, embeddings, params: LossParams,
                step: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-6,
                corrupt: Optional[str] = None) -> list[GradCheckResult]:
    """Check every loss gradient on one batch.

    Similarity pairs and classification weights are frozen at the values the
    analytic pass used. ``corrupt`` names a loss whose analytic gradient is
    deliberately perturbed (negative control).
    """
    bundle = rpn_loss(batch, logits, deltas, embeddings, params, rng=np.random.default_rng(0))
    pairs = (bundle.pos_pairs, bundle.neg_pairs)
    weights = bundle.cls_weights
    pos, neg = batch.pos, batch.neg
    n_lab = max(len(pos) + len(neg), 1)

    def f_cls(lg):
        return iou_balanced_cls_loss(lg[pos], batch.pos_targets, None, lg[neg], params.eta,
                                     weights=weights).value / n_lab

    def f_reg(dl):
        if len(pos) == 0:
            return 0.0
        return smooth_l1(dl[pos], batch.reg_targets, params.smooth_l1_beta)[0] / len(pos)

    def f_sim(em):
        return similarity_loss(em, *pairs, with_grad=False).value

    def rpn(lg, dl, em):
        # independent recomputation of l_reg + l_cls + lam * l_sim from the raw formulas
        return f_cls(lg) + f_reg(dl) + params.lam * f_sim(em)

    analytic = {
        "l_cls": [bundle.grad_logits],
        "l_reg": [bundle.grad_deltas],
        "l_sim": [bundle.grad_sim],
        "l_rpn": [bundle.grad_logits, bundle.grad_deltas, bundle.grad_embeddings],
    }
    if corrupt is not None:
        if corrupt not in analytic:
            raise ValueError(f"unknown loss {corrupt!r}")
        analytic[corrupt] = [g.copy() for g in analytic[corrupt]]
        for g in analytic[corrupt]:
            g.reshape(-1)[:] += 0.1 + np.abs(g.reshape(-1))

    numeric = {
        "l_cls": [finite_difference(f_cls, logits, step)],
        "l_reg": [finite_difference(f_reg, deltas, step)],
        "l_sim": [finite_difference(f_sim, embeddings, step)],
        "l_rpn": [
            finite_difference(lambda x: rpn(x, deltas, embeddings), logits, step),
            finite_difference(lambda x: rpn(logits, x, embeddings), deltas, step),
            finite_difference(lambda x: rpn(logits, deltas, x), embeddings, step),
        ],
    }
    results = []
    for name in LOSS_NAMES:
        a = np.concatenate([g.ravel() for g in analytic[name]])
        n = np.concatenate([g.ravel() for g in numeric[name]])
        worst, idx, ok = compare(a, n, rtol, atol)
        results.append(GradCheckResult(name, worst, idx, ok))
    return results


def run_gradcheck(n_batches: int, params: LossParams = LossParams(), seed: int = 0,
                  rtol: float = 1e-4, atol: float = 1e-6, step: float = 1e-5,
                  corrupt: Optional[str] = None) -> dict[str, GradCheckResult]:
    """Worst result per loss over ``n_batches`` random batches."""
    rng = np.random.default_rng(seed)
    worst = {name: GradCheckResult(name, 0.0, -1, True) for name in LOSS_NAMES}
    for _ in range(n_batches):
        batch, logits, deltas, emb = random_batch(rng)
        for r in check_batch(batch, logits, deltas, emb, params, step, rtol, atol, corrupt):
            cur = worst[r.loss]
            worst[r.loss] = GradCheckResult(
                r.loss,
                max(cur.worst_rel_error, r.worst_rel_error),
                r.worst_index if r.worst_rel_error > cur.worst_rel_error else cur.worst_index,
                cur.passed and r.passed,
            )
    return worst
