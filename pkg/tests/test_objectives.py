import math

import numpy as np
import pytest

from mcseg import nn
from mcseg import objectives as obj
from mcseg.errors import NumericalError
from mcseg.geometry import inverse_sdf, sdf_normalize, sdf_transform
from mcseg.model import NetConfig, build_network

from gradcheck import check_gradients, jitter_params
from oracles import naive_ce, naive_mse


def toy_net(seed=0):
    cfg = NetConfig(dims=2, in_channels=1, num_categories=2, base_width=2,
                    depth=2, dropout_rate=0.0, dtype="float64")
    net = build_network(cfg, seed=seed)
    assert net.num_parameters() <= 1000
    return jitter_params(net, seed=seed + 100)


class TestDiceLoss:
    def test_perfect_prediction(self):
        y = np.zeros((1, 4, 4), dtype=np.uint8)
        y[0, 1:3, 1:3] = 1
        probs = np.stack([1.0 - y[0], y[0]], axis=0)[None].astype(np.float64)
        assert obj.dice_loss(probs, y) == pytest.approx(0.0, abs=1e-4)

    def test_total_mismatch(self):
        y = np.zeros((1, 4, 4), dtype=np.uint8)
        y[0, :2] = 1
        probs = np.stack([y[0], 1.0 - y[0]], axis=0)[None].astype(np.float64)
        assert obj.dice_loss(probs, y) == pytest.approx(1.0, abs=1e-4)

    def test_uniform_half_foreground(self):
        y = np.zeros((1, 4, 4), dtype=np.uint8)
        y[0, :2] = 1
        probs = np.full((1, 2, 4, 4), 0.5)
        assert obj.dice_loss(probs, y) == pytest.approx(0.5, abs=1e-4)

    def test_bounded_and_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            scores = rng.standard_normal((1, 2, 4, 4))
            probs = nn.softmax(scores, axis=1)
            y = (rng.random((1, 4, 4)) < 0.5).astype(np.uint8)
            val = obj.dice_loss(probs, y)
            assert 0.0 <= val <= 1.0 + obj.DICE_EPS

    def test_macro_average_multicategory(self):
        y = np.zeros((1, 2, 2), dtype=np.uint8)
        y[0, 0, 0] = 1
        y[0, 1, 1] = 2
        probs = np.full((1, 3, 2, 2), 1 / 3)
        val = obj.dice_loss(probs, y)
        per_cat = 1 - (2 * (1 / 3) + obj.DICE_EPS) / ((4 / 3) + 1 + obj.DICE_EPS)
        assert val == pytest.approx(per_cat, abs=1e-12)


class TestCeLoss:
    def test_confident_correct(self):
        y = np.zeros((1, 2, 2), dtype=np.uint8)
        scores = np.zeros((1, 2, 2, 2))
        scores[:, 0] = 50.0
        assert obj.ce_loss(scores, y) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_scores(self):
        y = np.zeros((1, 3, 3), dtype=np.uint8)
        scores = np.zeros((1, 2, 3, 3))
        assert obj.ce_loss(scores, y) == pytest.approx(math.log(2), rel=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        scores = rng.standard_normal((2, 3, 4, 4))
        y = rng.integers(0, 3, (2, 4, 4)).astype(np.uint8)
        assert obj.ce_loss(scores, y) == pytest.approx(naive_ce(scores, y), rel=1e-7)

    def test_extreme_scores_stable(self):
        y = np.zeros((1, 2, 2), dtype=np.uint8)
        scores = np.zeros((1, 2, 2, 2))
        scores[:, 1] = 1e4
        val = obj.ce_loss(scores, y)
        assert math.isfinite(val) and val == pytest.approx(1e4, rel=1e-6)


class TestDistLoss:
    def test_identity(self):
        pred = np.random.default_rng(0).uniform(-1, 1, (1, 1, 4, 4))
        assert obj.dist_loss(pred, pred) == 0.0

    def test_constant_offset(self):
        pred = np.zeros((1, 1, 5, 5))
        assert obj.dist_loss(pred + 0.1, pred) == pytest.approx(0.01, rel=1e-9)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, (1, 1, 4, 4))
        b = rng.uniform(-1, 1, (1, 1, 4, 4))
        assert obj.dist_loss(a, b) == pytest.approx(naive_mse(a, b), rel=1e-9)


class TestPredictiveEntropy:
    def test_maximum_binary_entropy(self):
        u = obj.predictive_entropy(np.array([[0.5], [0.5]]), axis=0)
        assert u.data[0] == pytest.approx(math.log(2), rel=1e-12)

    def test_certain_prediction(self):
        u = obj.predictive_entropy(np.array([[1.0], [0.0]]), axis=0)
        assert u.data[0] == 0.0

    def test_skewed_value(self):
        u = obj.predictive_entropy(np.array([[0.9], [0.1]]), axis=0)
        assert u.data[0] == pytest.approx(0.3250829733914482, rel=1e-12)

    def test_bounds_on_random_vectors(self):
        rng = np.random.default_rng(3)
        for num_cat in (2, 3, 5):
            raw = rng.random((1000, num_cat)) + 1e-9
            probs = raw / raw.sum(axis=1, keepdims=True)
            u = obj.predictive_entropy(probs, axis=1)
            assert u.u_max_bound == pytest.approx(math.log(num_cat))
            assert (u.data >= 0).all() and (u.data <= math.log(num_cat)).all()


class TestSchedules:
    def test_rampup_endpoints(self):
        assert obj.rampup_weight(100, 100) == 0.1
        assert obj.rampup_weight(0, 100) == pytest.approx(0.1 * math.exp(-5), abs=1e-12)

    def test_rampup_monotone(self):
        vals = [obj.rampup_weight(t, 50) for t in range(51)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_rampup_squared_variant(self):
        assert obj.rampup_weight(0, 10, squared=True) == pytest.approx(0.1 * math.exp(-5))
        assert obj.rampup_weight(10, 10, squared=True) == 0.1
        assert obj.rampup_weight(5, 10, squared=True) == pytest.approx(0.1 * math.exp(-5 * 0.25))

    def test_threshold_endpoints(self):
        assert obj.threshold_schedule(100, 100, 2) == pytest.approx(math.log(2), abs=1e-12)
        expected0 = (0.75 + 0.25 * math.exp(-5)) * math.log(2)
        assert obj.threshold_schedule(0, 100, 2) == pytest.approx(expected0, abs=1e-12)

    def test_threshold_monotone(self):
        vals = [obj.threshold_schedule(t, 40, 2) for t in range(41)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_lr_schedule(self):
        assert obj.lr_schedule(0) == 0.01
        assert obj.lr_schedule(2500) == pytest.approx(0.001)
        assert obj.lr_schedule(5999) == pytest.approx(0.0001)
        for t in range(0, 6001):
            assert obj.lr_schedule(t) == 0.01 * 0.1 ** (t // 2500)


class TestCertaintyMask:
    def test_mask_grows_with_threshold(self):
        rng = np.random.default_rng(4)
        raw = rng.random((500, 2)) + 1e-9
        probs = raw / raw.sum(axis=1, keepdims=True)
        u = obj.predictive_entropy(probs, axis=1)
        counts = [
            int(obj.certainty_mask(u, th).sum())
            for th in np.linspace(0.0, math.log(2) + 0.01, 20)
        ]
        assert all(b >= a for a, b in zip(counts, counts[1:]))

    def test_above_umax_selects_everything(self):
        u = obj.UncertaintyMap(np.full((3, 3), math.log(2)), math.log(2))
        assert obj.certainty_mask(u, math.log(2) + 1e-9).all()


class TestIntraTaskConsistency:
    def test_identical_predictions(self):
        rng = np.random.default_rng(5)
        seg = rng.random((1, 2, 4, 4))
        dist = rng.uniform(-1, 1, (1, 1, 4, 4))
        mask = np.ones((1, 4, 4), dtype=bool)
        assert obj.intra_task_consistency(seg, dist, seg, dist, mask, 0.75) == 0.0

    def test_beta_one_ignores_distance_branch(self):
        rng = np.random.default_rng(6)
        seg_s, seg_t = rng.random((2, 1, 2, 4, 4))
        dist_s = rng.uniform(-1, 1, (1, 1, 4, 4))
        mask = np.ones((1, 4, 4), dtype=bool)
        base = obj.intra_task_consistency(seg_s, dist_s, seg_t, np.zeros_like(dist_s), mask, 1.0)
        moved = obj.intra_task_consistency(
            seg_s, dist_s + 9.9, seg_t, np.zeros_like(dist_s), mask, 1.0
        )
        assert base == moved

    def test_hand_case(self):
        # 2 voxels, mask [1,0], seg diff [0.2, 9.9], dist diff [0.4, 9.9]
        s_seg = np.array([[[0.2, 9.9]]])[:, :, None]      # (1, 1, 1, 2)
        t_seg = np.zeros_like(s_seg)
        s_dist = np.array([[[0.4, 9.9]]])[:, :, None]
        t_dist = np.zeros_like(s_dist)
        mask = np.array([[True, False]])[:, None]          # (1, 1, 2)
        val = obj.intra_task_consistency(s_seg, s_dist, t_seg, t_dist, mask, 0.75)
        assert val == pytest.approx(0.07, rel=1e-12)

    def test_all_false_mask_returns_zero(self):
        seg = np.ones((1, 2, 2, 2))
        dist = np.ones((1, 1, 2, 2))
        mask = np.zeros((1, 2, 2), dtype=bool)
        val, (gs, gd) = obj.intra_task_consistency(
            seg, dist, 0 * seg, 0 * dist, mask, 0.5, grad=True
        )
        assert val == 0.0 and not gs.any() and not gd.any()

    def test_full_mask_equals_unmasked_mean(self):
        rng = np.random.default_rng(7)
        s_seg, t_seg = rng.random((2, 2, 2, 4, 4))
        s_dist, t_dist = rng.uniform(-1, 1, (2, 2, 1, 4, 4))
        mask = np.ones((2, 4, 4), dtype=bool)
        beta = 0.75
        val = obj.intra_task_consistency(s_seg, s_dist, t_seg, t_dist, mask, beta)
        expected = beta * np.mean((s_seg - t_seg) ** 2) + (1 - beta) * np.mean(
            (s_dist - t_dist) ** 2
        )
        assert val == pytest.approx(expected, abs=1e-7)


class TestCrossTaskConsistency:
    def test_sdf_of_mask_agrees_off_boundary(self):
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:12, 4:12] = 1
        sdf = sdf_normalize(sdf_transform(mask))
        probs = np.stack([1.0 - mask, mask]).astype(np.float64)[None]
        val = obj.cross_task_consistency(probs, sdf[None, None], k=1500.0)
        boundary_fraction = float((sdf == 0).mean())
        assert val <= 0.25 * boundary_fraction + 1e-9

    def test_midpoint_fixed_point(self):
        probs = np.full((1, 2, 3, 3), 0.5)
        dist = np.zeros((1, 1, 3, 3))
        assert obj.cross_task_consistency(probs, dist, k=1500.0) == 0.0

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(8)
        probs = nn.softmax(rng.standard_normal((1, 2, 4, 4)), axis=1)
        dist = rng.uniform(-1, 1, (1, 1, 4, 4))
        k = 7.0
        naive = naive_mse(probs[:, 1:], inverse_sdf(dist, k))
        assert obj.cross_task_consistency(probs, dist, k) == pytest.approx(naive, rel=1e-9)


class TestTotalLoss:
    def test_breakdown_identity(self):
        b = obj.total_loss(
            step=3, sup_dice=0.5, sup_ce=0.3, sup_dis=0.1, itc=0.02, ctc=0.04,
            lambda_i=0.05, lambda_c=0.07, u_th=0.6, beta=0.75,
        )
        expected = 0.5 + 0.3 + 0.1 + 0.05 * 0.02 + 0.07 * 0.04
        assert b.total == pytest.approx(expected, abs=1e-6)

    def test_supervised_only_when_consistency_disabled(self):
        b = obj.total_loss(
            step=0, sup_dice=0.4, sup_ce=0.2, sup_dis=0.0, itc=0.0, ctc=0.0,
            lambda_i=0.0, lambda_c=0.0, u_th=0.5, beta=0.75,
        )
        assert b.total == pytest.approx(0.6)

    def test_nonfinite_term_named(self):
        with pytest.raises(NumericalError, match="sup_ce"):
            obj.total_loss(
                step=1, sup_dice=0.1, sup_ce=float("nan"), sup_dis=0.0, itc=0.0,
                ctc=0.0, lambda_i=0.0, lambda_c=0.0, u_th=0.5, beta=0.75,
            )

    def test_csv_round_trip_fields(self):
        b = obj.total_loss(
            step=2, sup_dice=0.5, sup_ce=0.3, sup_dis=0.1, itc=0.0, ctc=0.0,
            lambda_i=0.1, lambda_c=0.1, u_th=0.6, beta=0.75,
        )
        header = obj.LossBreakdown.csv_header().split(",")
        row = b.csv_row().split(",")
        assert header[0] == "step" and len(header) == len(row) == 11


class TestLossGradients:
    """Analytic gradients through a toy net match central finite differences."""

    def setup_method(self):
        self.net = toy_net(seed=11)
        rng = np.random.default_rng(12)
        self.x = rng.standard_normal((1, 1, 8, 8))
        self.y = (rng.random((1, 8, 8)) < 0.5).astype(np.uint8)
        self.gt_sdf = sdf_normalize(sdf_transform(self.y[0]))[None, None]
        self.t_seg = nn.softmax(rng.standard_normal((1, 2, 8, 8)), axis=1)
        self.t_dist = rng.uniform(-0.9, 0.9, (1, 1, 8, 8))
        self.mask = rng.random((1, 8, 8)) < 0.7

    def test_dice(self):
        def spec(scores, probs, dist):
            loss, dp = obj.dice_loss(probs, self.y, grad=True)
            return loss, nn.softmax_vjp(probs, dp, axis=1), np.zeros_like(dist)

        assert check_gradients(self.net, self.x, spec) < 1e-3

    def test_ce(self):
        def spec(scores, probs, dist):
            loss, ds = obj.ce_loss(scores, self.y, grad=True)
            return loss, ds, np.zeros_like(dist)

        assert check_gradients(self.net, self.x, spec) < 1e-3

    def test_dist(self):
        def spec(scores, probs, dist):
            loss, dd = obj.dist_loss(dist, self.gt_sdf, grad=True)
            return loss, np.zeros_like(scores), dd

        assert check_gradients(self.net, self.x, spec) < 1e-3

    def test_intra_task(self):
        def spec(scores, probs, dist):
            loss, (dp, dd) = obj.intra_task_consistency(
                probs, dist, self.t_seg, self.t_dist, self.mask, 0.75, grad=True
            )
            return loss, nn.softmax_vjp(probs, dp, axis=1), dd

        assert check_gradients(self.net, self.x, spec) < 1e-3

    def test_cross_task(self):
        def spec(scores, probs, dist):
            loss, (dp, dd) = obj.cross_task_consistency(probs, dist, 5.0, grad=True)
            return loss, nn.softmax_vjp(probs, dp, axis=1), dd

        assert check_gradients(self.net, self.x, spec) < 1e-3

    def test_teacher_side_has_no_gradient(self):
        probs = self.t_seg.copy()
        dist = self.t_dist.copy()
        _, (dp, dd) = obj.intra_task_consistency(
            probs, dist, probs.copy(), dist.copy(), self.mask, 0.75, grad=True
        )
        assert not dp.any() and not dd.any()
