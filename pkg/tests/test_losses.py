import math
from types import SimpleNamespace

import numpy as np
import pytest

from setseg import losses
from setseg.losses import LossConfig, classification_loss, dice_loss, focal_loss, total_loss
from setseg.matcher import Assignment
from setseg.pipeline import TargetSet
from setseg.tensor import Tensor, backward

from conftest import central_difference, max_rel_error

BIG = 40.0   # sigmoid(+-40) is 1/0 to ~4e-18


class TestDice:
    def test_perfect_overlap_is_zero(self):
        logits = Tensor(np.full((2, 2), BIG, dtype=np.float64))
        gt = np.ones((2, 2))
        out = dice_loss(logits, gt, np.ones((2, 2), dtype=bool), eps=1.0)
        assert abs(out.item() - 0.0) < 1e-12

    def test_disjoint_hand_value(self):
        # p=[1,1,0,0], g=[0,0,1,1]: 1 - (0 + 1)/(2 + 2 + 1) = 0.8
        logits = Tensor(np.array([[BIG, BIG], [-BIG, -BIG]], dtype=np.float64))
        gt = np.array([[0, 0], [1, 1]])
        out = dice_loss(logits, gt, np.ones((2, 2), dtype=bool), eps=1.0)
        assert abs(out.item() - 0.8) < 1e-12

    def test_padding_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((3, 4))
        gt = rng.integers(0, 2, size=(3, 4))
        base = dice_loss(Tensor(logits), gt, np.ones((3, 4), dtype=bool)).item()
        logits_p = np.concatenate([logits, rng.standard_normal((2, 4))], axis=0)
        gt_p = np.concatenate([gt, rng.integers(0, 2, size=(2, 4))], axis=0)
        valid_p = np.concatenate([np.ones((3, 4), bool), np.zeros((2, 4), bool)], axis=0)
        padded = dice_loss(Tensor(logits_p), gt_p, valid_p).item()
        assert abs(base - padded) <= 1e-7

    def test_all_invalid_returns_zero_with_counter(self):
        losses.LOSS_STATS.reset()
        out = dice_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 2), bool))
        assert out.item() == 0.0
        assert losses.LOSS_STATS.degenerate_dice_calls == 1

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            v = dice_loss(
                Tensor(rng.standard_normal((4, 4)) * 3),
                rng.integers(0, 2, size=(4, 4)),
                np.ones((4, 4), bool),
            ).item()
            assert 0.0 <= v <= 1.0


class TestFocal:
    def test_perfectly_classified_is_zero(self):
        gt = np.array([[1, 0], [0, 1]])
        logits = Tensor(np.where(gt, BIG, -BIG).astype(np.float64))
        out = focal_loss(logits, gt, np.ones((2, 2), bool), alpha=0.25, gamma=2.0)
        assert abs(out.item()) < 1e-12

    def test_gamma_zero_reduces_to_half_bce(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((3, 3))
        gt = rng.integers(0, 2, size=(3, 3)).astype(np.float64)
        out = focal_loss(Tensor(logits, dtype=np.float64), gt, np.ones((3, 3), bool),
                         alpha=0.5, gamma=0.0).item()
        p = 1.0 / (1.0 + np.exp(-logits))
        bce = -(gt * np.log(p) + (1 - gt) * np.log(1 - p)).mean()
        assert abs(out - 0.5 * bce) < 1e-9

    def test_single_pixel_hand_value(self):
        # 0.25 * (1-0.9)^2 * (-ln 0.9) = 2.634012891445657e-4
        logit = math.log(0.9 / 0.1)
        out = focal_loss(Tensor(np.array([[logit]], dtype=np.float64)),
                         np.array([[1]]), np.ones((1, 1), bool),
                         alpha=0.25, gamma=2.0)
        assert abs(out.item() - 2.634012891445657e-4) < 1e-12

    def test_padding_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((4, 3))
        gt = rng.integers(0, 2, size=(4, 3))
        base = focal_loss(Tensor(logits), gt, np.ones((4, 3), bool)).item()
        logits_p = np.concatenate([logits, rng.standard_normal((4, 2))], axis=1)
        gt_p = np.concatenate([gt, rng.integers(0, 2, size=(4, 2))], axis=1)
        valid_p = np.concatenate([np.ones((4, 3), bool), np.zeros((4, 2), bool)], axis=1)
        padded = focal_loss(Tensor(logits_p), gt_p, valid_p).item()
        assert abs(base - padded) <= 1e-7

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            v = focal_loss(Tensor(rng.standard_normal((3, 3)) * 4),
                           rng.integers(0, 2, size=(3, 3)),
                           np.ones((3, 3), bool)).item()
            assert v >= 0.0

    def test_bad_alpha_rejected(self):
        with pytest.raises(losses.LossError):
            focal_loss(Tensor(np.zeros((1, 1))), np.zeros((1, 1)),
                       np.ones((1, 1), bool), alpha=1.5)


class TestClassification:
    def test_uniform_logits_all_real(self):
        k = 4
        logits = Tensor(np.zeros((6, k + 1)))
        labels = np.array([1, 2, 3, 4, 1, 2])
        out = classification_loss(logits, labels, no_object_weight=1e-4)
        assert abs(out.item() - math.log(k + 1)) < 1e-6

    def test_all_no_object_weight_cancels(self):
        k = 3
        logits = Tensor(np.zeros((5, k + 1)))
        labels = np.full(5, k + 1)
        for w in (1e-4, 0.5, 3.0):
            out = classification_loss(logits, labels, no_object_weight=w)
            assert abs(out.item() - math.log(k + 1)) < 1e-6

    def test_two_query_hand_value(self):
        # one real with p_true 0.5, one no-object with p_true 0.25, w=1e-4:
        # (-ln 0.5 + 1e-4 * -ln 0.25) / 1.0001
        k = 3
        q0 = [math.log(0.5)] + [math.log(0.5 / 3)] * 3
        q1 = [math.log(0.25)] * 4
        logits = Tensor(np.array([q0, q1]), dtype=np.float64)
        labels = np.array([1, k + 1])
        expected = (-math.log(0.5) + 1e-4 * -math.log(0.25)) / 1.0001
        out = classification_loss(logits, labels, no_object_weight=1e-4)
        assert abs(out.item() - expected) < 1e-12

    def test_label_out_of_range(self):
        logits = Tensor(np.zeros((2, 4)))
        with pytest.raises(losses.LossError) as err:
            classification_loss(logits, np.array([1, 7]))
        assert "7" in str(err.value)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        v = classification_loss(
            Tensor(rng.standard_normal((8, 5))),
            rng.integers(1, 6, size=8),
        ).item()
        assert v >= 0.0


class TestGradients:
    def test_dice_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            arr = rng.standard_normal((3, 3))
            gt = rng.integers(0, 2, size=(3, 3))
            valid = np.ones((3, 3), bool)
            x = Tensor(arr, requires_grad=True, dtype=np.float64)
            backward(dice_loss(x, gt, valid))
            numeric = central_difference(
                lambda a: dice_loss(Tensor(a, dtype=np.float64), gt, valid).item(), [arr], 0)
            assert max_rel_error(x.grad, numeric) <= 1e-4

    def test_focal_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            arr = rng.standard_normal((3, 3))
            gt = rng.integers(0, 2, size=(3, 3))
            valid = np.ones((3, 3), bool)
            x = Tensor(arr, requires_grad=True, dtype=np.float64)
            backward(focal_loss(x, gt, valid))
            numeric = central_difference(
                lambda a: focal_loss(Tensor(a, dtype=np.float64), gt, valid).item(), [arr], 0)
            assert max_rel_error(x.grad, numeric) <= 1e-4

    def test_classification_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            arr = rng.standard_normal((4, 5))
            labels = rng.integers(1, 6, size=4)
            x = Tensor(arr, requires_grad=True, dtype=np.float64)
            backward(classification_loss(x, labels))
            numeric = central_difference(
                lambda a: classification_loss(Tensor(a, dtype=np.float64), labels).item(),
                [arr], 0)
            assert max_rel_error(x.grad, numeric) <= 1e-4

    def test_monotone_toward_target(self):
        # raising a logit where g=1 must lower dice and focal: gradient < 0 there
        gt = np.zeros((2, 2))
        gt[0, 0] = 1
        arr = np.zeros((2, 2))
        valid = np.ones((2, 2), bool)
        x = Tensor(arr, requires_grad=True, dtype=np.float64)
        backward(dice_loss(x, gt, valid))
        assert x.grad[0, 0] < 0 and x.grad[1, 1] > 0
        y = Tensor(arr, requires_grad=True, dtype=np.float64)
        backward(focal_loss(y, gt, valid))
        assert y.grad[0, 0] < 0 and y.grad[1, 1] > 0


class TestTotalLoss:
    def _fixture(self):
        # 2 queries, 1 GT, 3x3 masks, K=3
        rng = np.random.default_rng(9)
        mask_logits = rng.standard_normal((1, 2, 3, 3))
        class_logits = rng.standard_normal((1, 2, 4))
        outputs = SimpleNamespace(
            mask_logits=Tensor(mask_logits, dtype=np.float64),
            class_logits=Tensor(class_logits, dtype=np.float64),
        )
        gt = np.zeros((3, 3), dtype=np.uint8)
        gt[:2, :2] = 1
        targets = TargetSet(masks=[gt], labels=[2])
        valid = np.ones((3, 3), dtype=bool)
        assignment = Assignment(np.array([1]), 0.0)
        return outputs, targets, valid, assignment, mask_logits, class_logits

    def test_components_match_independent_recomputation(self):
        outputs, targets, valid, assignment, ml, cl = self._fixture()
        cfg = LossConfig()
        bundle = total_loss(outputs, targets, assignment, cfg, valid)

        # independent recomputation, plain numpy
        logits = ml[0, 1]
        gt = np.zeros((3, 3))
        gt[:2, :2] = 1
        p = 1.0 / (1.0 + np.exp(-logits))
        dice = 1.0 - (2.0 * (p * gt).sum() + 1.0) / (p.sum() + gt.sum() + 1.0)
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        pt = np.where(gt > 0, pc, 1.0 - pc)
        at = np.where(gt > 0, 0.25, 0.75)
        focal = (at * (1.0 - pt) ** 2 * -np.log(pt)).mean()
        z = cl[0]
        logp = z - np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1, keepdims=True)) \
            - z.max(-1, keepdims=True)
        # query 1 matched to class 2 (column 1); query 0 is no-object (column 3)
        w = np.array([1e-4, 1.0])
        picked = np.array([logp[0, 3], logp[1, 1]])
        cls = -(w * picked).sum() / w.sum()

        assert abs(bundle.dice - dice) <= 1e-3
        assert abs(bundle.focal - focal) <= 1e-3
        assert abs(bundle.classification - cls) <= 1e-3
        assert abs(bundle.dice - dice) < 1e-6   # observed error far below the 1e-3 gate

    def test_total_is_exact_weighted_sum(self):
        outputs, targets, valid, assignment, _, _ = self._fixture()
        cfg = LossConfig()
        bundle = total_loss(outputs, targets, assignment, cfg, valid)
        expected = (cfg.class_weight * bundle.classification
                    + cfg.focal_weight * bundle.focal
                    + cfg.dice_weight * bundle.dice)
        assert bundle.total == expected
        assert bundle.total >= 0.0

    def test_perfect_prediction_near_zero(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[1:3, 1:3] = 1
        mask_logits = np.full((1, 2, 4, 4), -BIG)
        mask_logits[0, 0] = np.where(gt, BIG, -BIG)
        class_logits = np.full((1, 2, 4), -BIG)
        class_logits[0, 0, 0] = BIG       # query 0 confident class 1
        class_logits[0, 1, 3] = BIG       # query 1 confident no-object
        outputs = SimpleNamespace(
            mask_logits=Tensor(mask_logits, dtype=np.float64),
            class_logits=Tensor(class_logits, dtype=np.float64),
        )
        targets = TargetSet(masks=[gt], labels=[1])
        bundle = total_loss(outputs, targets, Assignment(np.array([0]), 0.0),
                            LossConfig(), np.ones((4, 4), bool))
        assert bundle.classification < 1e-3
        assert bundle.focal < 1e-3
        assert bundle.dice < 1e-3

    def test_empty_targets_reduce_to_classification(self):
        rng = np.random.default_rng(10)
        outputs = SimpleNamespace(
            mask_logits=Tensor(rng.standard_normal((1, 3, 4, 4))),
            class_logits=Tensor(rng.standard_normal((1, 3, 5))),
        )
        targets = TargetSet(masks=[], labels=[])
        bundle = total_loss(outputs, targets, Assignment(np.zeros(0, dtype=int), 0.0),
                            LossConfig(), np.ones((4, 4), bool))
        assert bundle.focal == 0.0 and bundle.dice == 0.0
        expected = classification_loss(
            outputs.class_logits[0], np.full(3, 5), no_object_weight=1e-4).item()
        assert abs(bundle.total - expected) < 1e-6

    def test_sum_reduction_scales_with_pair_count(self):
        rng = np.random.default_rng(12)
        mask_logits = rng.standard_normal((1, 3, 3, 3))
        class_logits = rng.standard_normal((1, 3, 4))
        outputs = SimpleNamespace(
            mask_logits=Tensor(mask_logits, dtype=np.float64),
            class_logits=Tensor(class_logits, dtype=np.float64),
        )
        g1 = np.zeros((3, 3), dtype=np.uint8)
        g1[0] = 1
        g2 = np.zeros((3, 3), dtype=np.uint8)
        g2[2] = 1
        targets = TargetSet([g1, g2], [1, 2])
        assignment = Assignment(np.array([0, 2]), 0.0)
        valid = np.ones((3, 3), bool)
        mean_b = total_loss(outputs, targets, assignment, LossConfig(), valid)
        sum_b = total_loss(outputs, targets, assignment,
                           LossConfig(pair_reduction="sum"), valid)
        assert abs(sum_b.dice - 2.0 * mean_b.dice) < 1e-9
        assert abs(sum_b.focal - 2.0 * mean_b.focal) < 1e-9

    def test_backward_through_bundle(self):
        rng = np.random.default_rng(11)
        ml = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
        cl = Tensor(rng.standard_normal((1, 2, 4)), requires_grad=True, dtype=np.float64)
        outputs = SimpleNamespace(mask_logits=ml, class_logits=cl)
        gt = np.zeros((3, 3), dtype=np.uint8)
        gt[0] = 1
        bundle = total_loss(outputs, TargetSet([gt], [1]), Assignment(np.array([0]), 0.0),
                            LossConfig(), np.ones((3, 3), bool))
        backward(bundle.total_tensor)
        assert ml.grad is not None and np.abs(ml.grad).sum() > 0
        assert cl.grad is not None and np.abs(cl.grad).sum() > 0
