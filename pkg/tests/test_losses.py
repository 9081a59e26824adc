import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchor3d.assignment import AssignmentConfig, assign_anchor_array
from anchor3d.gradcheck import random_batch
from anchor3d.losses import (
    DegenerateBatchError,
    DomainError,
    LossParams,
    RPNBatch,
    cosine_similarity,
    cross_entropy,
    cross_entropy_rows,
    iou_balance_weights,
    iou_balanced_cls_loss,
    rpn_loss,
    select_similarity_pairs,
    similarity_loss,
    similarity_loss_value,
    smooth_l1,
    total_loss,
)
from anchor3d.geometry import ConfigError, iou_matrix

from oracles import cross_entropy_mp, similarity_loss_reference, two_pass_cls_loss


class TestCrossEntropy:
    def test_confident_correct(self):
        assert cross_entropy([20.0, 0.0, 0.0], 0) < 1e-8

    def test_uniform(self):
        for t in range(3):
            assert cross_entropy([0.0, 0.0, 0.0], t) == pytest.approx(math.log(3), abs=1e-15)

    def test_matches_high_precision(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            logits = rng.normal(0, 5, size=3)
            t = int(rng.integers(0, 3))
            assert abs(cross_entropy(logits, t) - cross_entropy_mp(logits, t)) < 1e-12

    def test_large_logits_stay_finite(self):
        assert cross_entropy([1000.0, -1000.0, 0.0], 1) == pytest.approx(2000.0)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            cross_entropy([0.0, 0.0, 0.0], 3)


class TestBalanceWeights:
    def test_eta_zero_all_ones(self):
        w = iou_balance_weights([0.1, 0.5, 0.9], [1.0, 2.0, 0.3], 0.0)
        np.testing.assert_array_equal(w, [1.0, 1.0, 1.0])

    def test_hand_example(self):
        w = iou_balance_weights([0.9, 0.3], [1.0, 1.0], 1.0)
        np.testing.assert_allclose(w, [1.5, 0.5], rtol=1e-15)

    @settings(max_examples=200)
    @given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(0.01, 10.0)), min_size=1, max_size=64),
           st.sampled_from([0.0, 0.5, 1.0, 1.5, 3.0]))
    def test_sum_preserved(self, rows, eta):
        ious, ces = np.array(rows).T
        w = iou_balance_weights(ious, ces, eta)
        assert np.all(w >= 0)
        assert math.isclose(np.sum(w * ces), np.sum(ces), rel_tol=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateBatchError):
            iou_balance_weights([0.0, 0.0], [1.0, 2.0], 1.5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            iou_balance_weights([1.2], [1.0], 1.0)
        with pytest.raises(ValueError):
            iou_balance_weights([], [], 1.0)


class TestClsLoss:
    def test_eta_zero_is_plain_ce(self):
        rng = np.random.default_rng(1)
        pl, nl = rng.normal(size=(6, 3)), rng.normal(size=(9, 3))
        t = rng.integers(1, 3, size=6)
        v = iou_balanced_cls_loss(pl, t, rng.uniform(0.1, 1, 6), nl, 0.0).value
        plain = cross_entropy_rows(pl, t).sum() + cross_entropy_rows(nl, np.zeros(9, int)).sum()
        assert abs(v - plain) <= 1e-12 * abs(plain)

    def test_no_negatives(self):
        pl = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 2.0]])
        t = np.array([1, 2])
        ious = np.array([0.7, 0.4])
        loss = iou_balanced_cls_loss(pl, t, ious, np.zeros((0, 3)), 1.5)
        ce = cross_entropy_rows(pl, t)
        assert loss.value == pytest.approx(np.sum(iou_balance_weights(ious, ce, 1.5) * ce), rel=1e-14)

    def test_matches_two_pass(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n_pos, n_neg = rng.integers(1, 12), rng.integers(0, 20)
            pl, nl = rng.normal(0, 2, (n_pos, 3)), rng.normal(0, 2, (n_neg, 3))
            t = rng.integers(1, 3, size=n_pos)
            ious = rng.uniform(0.05, 1.0, size=n_pos)
            eta = float(rng.choice([0.0, 0.5, 1.0, 1.5, 3.0]))
            got = iou_balanced_cls_loss(pl, t, ious, nl, eta).value
            want = two_pass_cls_loss(pl, t, ious, nl, eta)
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


class TestSimilarity:
    def test_cosine_basics(self):
        z = np.array([1.0, 2.0, -3.0])
        assert cosine_similarity(z, z) == pytest.approx(1.0, abs=1e-15)
        assert cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0
        with pytest.raises(DomainError):
            cosine_similarity([0, 0, 0], z)

    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
           st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.floats(1e-3, 1e3))
    def test_cosine_scale_invariant(self, a, b, c):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        assert abs(cosine_similarity(c * a, b) - cosine_similarity(a, b)) < 1e-12

    def test_endpoints(self):
        assert similarity_loss_value(1.0, -1.0) == 0.0
        assert similarity_loss_value(-1.0, 1.0) == 1.0
        assert similarity_loss_value(0.3, 0.3) == 0.5

    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_range(self, s_pp, s_pn):
        assert 0.0 <= similarity_loss_value(s_pp, s_pn) <= 1.0

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(10, 5))
        pp = np.array([[0, 1], [2, 3], [0, 4]])
        pn = np.array([[0, 7], [2, 8], [0, 9]])
        assert similarity_loss(emb, pp, pn).value == pytest.approx(
            similarity_loss_reference(emb, pp, pn), abs=1e-14)

    def test_empty_pairs(self):
        out = similarity_loss(np.ones((3, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
        assert out.value == 0.0 and not out.grad.any()

    def _pair_fixture(self, mutual_overlap: bool):
        gt = np.array([[20.0, 20, 20, 10, 10, 10]])
        # shift 8.2 leaves a mutual IoU near 0.1 with gt IoUs near 0.42
        shift = 2.0 if mutual_overlap else 8.2
        anchors = np.array([
            [20 - shift / 2, 20, 20, 10, 10, 10],
            [20 + shift / 2, 20, 20, 10, 10, 10],
            [60, 60, 60, 10, 10, 10],
            [80, 80, 80, 10, 10, 10],
        ])
        return anchors, assign_anchor_array(anchors, gt, AssignmentConfig(0.2, 0.1))

    def test_one_pair(self):
        anchors, a = self._pair_fixture(True)
        pp, pn = select_similarity_pairs(a, anchors, LossParams(), np.random.default_rng(0))
        assert pp.tolist() == [[0, 1]]
        assert pn[0, 0] == 0 and pn[0, 1] in (2, 3)

    def test_low_mutual_iou_no_pairs(self):
        anchors, a = self._pair_fixture(False)
        assert a.iou[0] > 0.3 and a.iou[1] > 0.3
        assert iou_matrix(anchors[:1], anchors[1:2])[0, 0] == pytest.approx(0.1, abs=0.01)
        pp, _ = select_similarity_pairs(a, anchors, LossParams(), np.random.default_rng(0))
        assert len(pp) == 0

    def test_pairs_deterministic(self):
        batch = random_batch(np.random.default_rng(4), n_anchors=40)[0]
        runs = [select_similarity_pairs(batch.assignments, batch.anchors, LossParams(),
                                        np.random.default_rng(9)) for _ in range(2)]
        for x, y in zip(*runs):
            np.testing.assert_array_equal(x, y)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(np.ones(6), np.ones(6))[0] == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1([0.5, 0, 0, 0, 0, 0], np.zeros(6), 1.0)[0] == 0.125

    def test_linear_branch(self):
        assert smooth_l1([2.0, 0, 0, 0, 0, 0], np.zeros(6), 1.0)[0] == 1.5


class TestTotal:
    def test_default_lambda_combination(self):
        assert total_loss(1.0, 2.0, 0.5, 0.7) == pytest.approx(3.35, abs=1e-15)

    def test_lambda_zero_ignores_embeddings(self):
        batch, logits, deltas, emb = random_batch(np.random.default_rng(12), n_anchors=30)
        p = LossParams(lam=0.0)
        a = rpn_loss(batch, logits, deltas, emb, p)
        b = rpn_loss(batch, logits, deltas, emb * 3 + 1, p)
        assert a.l_rpn == b.l_rpn
        assert not a.grad_embeddings.any()

    def test_components_add_up(self):
        batch, logits, deltas, emb = random_batch(np.random.default_rng(13), n_anchors=30)
        out = rpn_loss(batch, logits, deltas, emb)
        assert out.l_rpn == pytest.approx(out.l_reg + out.l_cls + 0.7 * out.l_sim, rel=1e-15)

    def test_anchor_iou_source(self):
        batch, logits, deltas, emb = random_batch(np.random.default_rng(14), n_anchors=30)
        a = rpn_loss(batch, logits, deltas, emb, LossParams(iou_source="anchor"))
        b = rpn_loss(batch, logits, deltas * 0 + 5, emb, LossParams(iou_source="anchor"))
        np.testing.assert_array_equal(a.cls_weights, b.cls_weights)

    def test_no_positives(self):
        anchors = np.array([[10.0, 10, 10, 4, 4, 4]] * 3)
        batch = RPNBatch(anchors, np.zeros((0, 6)), np.zeros(0),
                         assign_anchor_array(anchors, np.zeros((0, 6))))
        out = rpn_loss(batch, np.zeros((3, 3)), np.zeros((3, 6)), np.ones((3, 4)))
        assert out.l_reg == 0.0 and out.l_sim == 0.0
        assert out.l_cls == pytest.approx(math.log(3))

    @pytest.mark.parametrize("kwargs", [{"eta": -1}, {"pair_gt_iou_threshold": 2},
                                        {"iou_source": "box"}, {"smooth_l1_beta": 0}])
    def test_invalid_params(self, kwargs):
        with pytest.raises(ConfigError):
            LossParams(**kwargs)
