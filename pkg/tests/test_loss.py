import numpy as np
import pytest

from pgcbm import loss as ls
from pgcbm import tensor as tc
from pgcbm.tensor import Tensor

Q5 = (0.1, 0.25, 0.5, 0.75, 0.9)
EPS = 1e-6


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPinball:
    def test_zero_residual(self):
        for q in (0.1, 0.5, 0.9):
            assert float(ls.pinball(np.array(0.0), q).data) == 0.0

    def test_hand_values(self):
        np.testing.assert_allclose(float(ls.pinball(np.array(2.0), 0.9).data), 1.8, atol=1e-9)
        np.testing.assert_allclose(float(ls.pinball(np.array(-1.0), 0.1).data), 0.9, atol=1e-9)

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            ls.pinball(np.array(1.0), 1.0)

    def test_convex_nonnegative(self):
        u = rng(1).normal(size=200) * 5
        v = ls.pinball(u, 0.3).data
        assert np.all(v >= 0)


class TestFocal:
    def test_perfect_prediction_is_zero(self):
        y = rng(2).normal(size=(3, 3))
        pred = np.repeat(y[None], 5, axis=0)
        loss, stats = ls.focal_quantile_loss(pred, y, np.ones((3, 3), bool), Q5)
        assert float(loss.data) == 0.0
        assert not stats.empty

    def test_single_pixel_hand_value(self):
        # one valid pixel, residual 1 at every level, z = 0
        y = np.array([[2.0]])
        pred = np.full((5, 1, 1), 1.0)
        loss, stats = ls.focal_quantile_loss(pred, y, np.ones((1, 1), bool), Q5)
        expect = (1.0 + EPS) ** 2 * np.mean([0.1, 0.25, 0.5, 0.75, 0.9])
        np.testing.assert_allclose(float(loss.data), expect, atol=1e-9)
        assert (stats.mu_y, stats.sigma_y) == (2.0, 0.0)

    def test_mask_contract_exact(self):
        r = rng(3)
        y = r.normal(size=(4, 4))
        pred = r.normal(size=(5, 4, 4))
        mask = r.random((4, 4)) > 0.4
        a, _ = ls.focal_quantile_loss(pred, y, mask, Q5)
        y2 = y.copy()
        y2[~mask] *= 2.0
        b, _ = ls.focal_quantile_loss(pred, y2, mask, Q5)
        assert float(a.data) == float(b.data)

    def test_empty_mask_flagged_zero(self):
        loss, stats = ls.focal_quantile_loss(
            np.zeros((5, 2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool), Q5)
        assert float(loss.data) == 0.0
        assert stats.empty

    def test_weight_monotone_in_residual(self):
        losses = []
        for resid in (0.5, 1.0, 2.0, 4.0):
            y = np.zeros((2, 1, 1)) + np.array([0.0, 1.0]).reshape(2, 1, 1)
            # two pixels pin the batch stats; vary only the first residual
            target = np.array([[[0.0]], [[1.0]]]).reshape(2, 1, 1)
            pred = np.stack([target - np.array([resid, 0.0]).reshape(2, 1, 1)
                             for _ in Q5], axis=1)
            l, _ = ls.focal_quantile_loss(
                pred, target.reshape(2, 1, 1), np.ones((2, 1, 1), bool), Q5)
            losses.append(float(l.data))
        assert losses == sorted(losses)

    def test_batched_layout(self):
        r = rng(4)
        y = r.normal(size=(2, 3, 3))
        pred = r.normal(size=(2, 5, 3, 3))
        mask = np.ones((2, 3, 3), bool)
        batched, _ = ls.focal_quantile_loss(pred, y, mask, Q5)
        assert np.isfinite(batched.data)


class TestMonotonicity:
    def test_sorted_is_zero(self):
        v = np.sort(rng(5).normal(size=(5, 4, 4)), axis=0)
        assert float(ls.monotonicity_loss(v).data) == 0.0

    def test_hand_value(self):
        v = np.array([2.0, 1.0]).reshape(2, 1, 1)
        np.testing.assert_allclose(float(ls.monotonicity_loss(v).data), 1.0, atol=1e-9)

    def test_shift_invariance(self):
        v = rng(6).normal(size=(5, 3, 3))
        a = float(ls.monotonicity_loss(v).data)
        b = float(ls.monotonicity_loss(v + 7.5).data)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_iff_sorted(self):
        v = rng(7).normal(size=(5, 3, 3))
        unsorted_val = float(ls.monotonicity_loss(v).data)
        assert (unsorted_val == 0.0) == bool(np.all(np.diff(v, axis=0) >= 0))
        assert float(ls.monotonicity_loss(np.sort(v, axis=0)).data) == 0.0


class TestSpatial:
    def test_constant_plane_floor(self):
        val = float(ls.spatial_consistency_loss(np.full((4, 4), 3.0)).data)
        np.testing.assert_allclose(val, np.sqrt(EPS), atol=1e-12)

    def test_monotone_in_edge_height(self):
        vals = []
        for d in (0.5, 1.0, 2.0, 4.0):
            plane = np.zeros((2, 2))
            plane[1, :] = d
            vals.append(float(ls.spatial_consistency_loss(plane).data))
        assert vals == sorted(vals)

    def test_transpose_invariant(self):
        p = rng(8).normal(size=(5, 5))
        a = float(ls.spatial_consistency_loss(p).data)
        b = float(ls.spatial_consistency_loss(p.T).data)
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestQuantileConsistency:
    def test_hand_value(self):
        pred = np.array([0.0, 1.0]).reshape(2, 1, 1)
        val = float(ls.quantile_consistency_loss(pred, (0.1, 0.9)).data)
        expect = 0.5 * (1.0 / (1.0 + EPS) - 0.8) ** 2
        np.testing.assert_allclose(val, expect, atol=1e-9)
        np.testing.assert_allclose(val, 0.02, atol=1e-6)

    def test_scale_invariance(self):
        pred = rng(9).normal(size=(5, 4, 4))
        a = float(ls.quantile_consistency_loss(pred, Q5).data)
        b = float(ls.quantile_consistency_loss(pred * 10.0, Q5).data)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_degenerate_constant_prediction(self):
        pred = np.full((5, 3, 3), 2.0)
        val = float(ls.quantile_consistency_loss(pred, Q5).data)
        dq = np.diff(Q5)
        np.testing.assert_allclose(val, 0.5 * np.mean(dq**2), atol=1e-9)

    def test_positive_floor(self):
        # normalized gaps sum to ~1 but level gaps sum to 0.8: never zero
        for seed in range(5):
            pred = np.sort(rng(seed).normal(size=(5, 4, 4)), axis=0)
            assert float(ls.quantile_consistency_loss(pred, Q5).data) > 0.0


class TestAdversarial:
    def test_identical_groups_zero(self):
        pred = np.tile(np.array([1.0, 2.0]), 8).reshape(4, 4)
        target = np.repeat([0.0, 1.0], 8).reshape(4, 4)
        loss, degenerate = ls.adversarial_js_loss(pred, target, np.ones((4, 4), bool))
        assert not degenerate
        np.testing.assert_allclose(float(loss.data), 0.0, atol=1e-9)

    def test_disjoint_support_limit(self):
        pred = np.array([[0.0, 1.0]])
        target = np.array([[0.0, 1.0]])
        loss, degenerate = ls.adversarial_js_loss(
            pred, target, np.ones((1, 2), bool), bins=2, eps=1e-12)
        assert not degenerate
        np.testing.assert_allclose(float(loss.data), np.log(2.0), atol=1e-9)

    def test_bounds(self):
        r = rng(10)
        for _ in range(20):
            pred = r.normal(size=(5, 5))
            target = r.normal(size=(5, 5))
            mask = r.random((5, 5)) > 0.3
            loss, degenerate = ls.adversarial_js_loss(pred, target, mask)
            if not degenerate:
                assert -1e-12 <= float(loss.data) <= np.log(2.0) + 1e-12

    def test_permutation_invariance(self):
        r = rng(11)
        pred = r.normal(size=16)
        target = r.normal(size=16)
        a, _ = ls.adversarial_js_loss(pred.reshape(4, 4), target.reshape(4, 4),
                                      np.ones((4, 4), bool))
        perm = r.permutation(16)
        b, _ = ls.adversarial_js_loss(pred[perm].reshape(4, 4),
                                      target[perm].reshape(4, 4),
                                      np.ones((4, 4), bool))
        np.testing.assert_allclose(float(a.data), float(b.data), atol=1e-12)

    def test_too_few_pixels_flagged(self):
        loss, degenerate = ls.adversarial_js_loss(
            np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))
        assert degenerate and float(loss.data) == 0.0


def make_batch(seed=0, n=2, h=4):
    r = rng(seed)
    cp = {k: r.normal(size=(n, 5, h, h)) for k in ("cover", "height", "stems")}
    ct = {k: r.normal(size=(n, h, h)) for k in cp}
    cm = {k: r.random((n, h, h)) > 0.4 for k in cp}
    tp = r.normal(size=(n, 5, h, h))
    tt = r.normal(size=(n, h, h))
    tm = r.random((n, h, h)) > 0.4
    return cp, ct, cm, tp, tt, tm


class TestTotal:
    def test_breakdown_identity(self):
        cp, ct, cm, tp, tt, tm = make_batch()
        w = ls.LossWeights(lambda_mono=0.1, lambda_spatial=0.05,
                           lambda_consistency=0.02, lambda_adv=0.01)
        total, b = ls.total_loss(cp, ct, cm, tp, tt, tm, w, Q5)
        recomputed = (b.quantile + w.lambda_mono * b.mono
                      + w.lambda_spatial * b.spatial
                      + w.lambda_consistency * b.consistency
                      + w.lambda_adv * b.adversarial)
        assert abs(b.total - recomputed) <= 1e-12
        assert abs(float(total.data) - b.total) <= 1e-12

    def test_weight_annihilation(self):
        cp, ct, cm, tp, tt, tm = make_batch(1)
        tp2 = np.repeat(tt[:, None], 5, axis=1)
        w = ls.LossWeights(lambda_mono=0, lambda_spatial=0,
                           lambda_consistency=0, lambda_adv=0,
                           alpha=(0, 0, 0), beta=1.0)
        total, _ = ls.total_loss(cp, ct, cm, tp2, tt, tm, w, Q5)
        assert float(total.data) == 0.0

    def test_heterogeneous_supervision(self):
        cp, ct, cm, tp, tt, tm = make_batch(2)
        tm = np.zeros_like(tm)  # concept-only batch
        w = ls.LossWeights()
        total, b = ls.total_loss(cp, ct, cm, tp, tt, tm, w, Q5)
        assert "task" in b.empty_heads
        assert b.quantile > 0.0

    def test_all_masks_empty_raises(self):
        cp, ct, cm, tp, tt, tm = make_batch(3)
        cm = {k: np.zeros_like(v) for k, v in cm.items()}
        tm = np.zeros_like(tm)
        with pytest.raises(ls.EmptySupervisionError):
            ls.total_loss(cp, ct, cm, tp, tt, tm, ls.LossWeights(), Q5)

    def test_mask_invariance(self):
        cp, ct, cm, tp, tt, tm = make_batch(4)
        w = ls.LossWeights(lambda_adv=0.0)  # adv split reads masked targets only
        a, _ = ls.total_loss(cp, ct, cm, tp, tt, tm, w, Q5)
        ct2 = {k: np.where(cm[k], v, v * 3 + 1) for k, v in ct.items()}
        tt2 = np.where(tm, tt, -tt)
        b, _ = ls.total_loss(cp, ct2, cm, tp, tt2, tm, w, Q5)
        assert float(a.data) == float(b.data)


class TestGradients:
    def test_focal_fd(self):
        r = rng(12)
        y = r.normal(size=(3, 3))
        mask = r.random((3, 3)) > 0.3

        def graph(t):
            loss, _ = ls.focal_quantile_loss(t["p"], y, mask, Q5)
            return loss

        err = tc.finite_difference_check(graph, {"p": r.normal(size=(5, 3, 3))}, step=1e-5)
        assert err < 1e-4

    def test_monotonicity_fd(self):
        err = tc.finite_difference_check(
            lambda t: ls.monotonicity_loss(t["p"]),
            {"p": rng(13).normal(size=(5, 3, 3))}, step=1e-5)
        assert err < 1e-4

    def test_spatial_fd(self):
        err = tc.finite_difference_check(
            lambda t: ls.spatial_consistency_loss(t["p"]),
            {"p": rng(14).normal(size=(4, 4))}, step=1e-5)
        assert err < 1e-4

    def test_consistency_fd(self):
        err = tc.finite_difference_check(
            lambda t: ls.quantile_consistency_loss(t["p"], Q5),
            {"p": rng(15).normal(size=(5, 3, 3))}, step=1e-5)
        assert err < 1e-4

    def test_adversarial_fd(self):
        r = rng(16)
        target = r.normal(size=(4, 4))
        mask = r.random((4, 4)) > 0.2

        def graph(t):
            loss, degenerate = ls.adversarial_js_loss(t["p"], target, mask, bins=8)
            assert not degenerate
            return loss

        err = tc.finite_difference_check(graph, {"p": r.normal(size=(4, 4))}, step=1e-5)
        assert err < 1e-4

    def test_total_fd(self):
        cp, ct, cm, tp, tt, tm = make_batch(5, n=1, h=3)
        w = ls.LossWeights(lambda_mono=0.1, lambda_spatial=0.05,
                           lambda_consistency=0.02, lambda_adv=0.01)

        def graph(t):
            preds = {k: t[k] for k in cp}
            total, _ = ls.total_loss(preds, ct, cm, t["task"], tt, tm, w, Q5)
            return total

        bindings = dict(cp)
        bindings["task"] = tp
        err = tc.finite_difference_check(graph, bindings, step=1e-5)
        assert err < 1e-4


class TestCurriculum:
    def test_epoch_zero_initial(self):
        w = ls.curriculum_update(0, 100, [], ls.LossWeights())
        assert w.lambdas() == ls.CURRICULUM_INITIAL

    def test_ramp_reaches_maxima(self):
        w = ls.LossWeights()
        for e in range(80):
            w = ls.curriculum_update(e, 100, [], w)
        w = ls.curriculum_update(80, 100, [1.0], w)
        assert w.lambdas() == ls.CURRICULUM_MAXIMA

    def test_midpoint_interpolation(self):
        w = ls.curriculum_update(45, 100, [], ls.LossWeights())
        t = (45 - 10) / 70
        expect = tuple(a + t * (b - a) for a, b in
                       zip(ls.CURRICULUM_INITIAL, ls.CURRICULUM_MAXIMA))
        np.testing.assert_allclose(w.lambdas(), expect, atol=1e-12)

    def test_stabilization_penalty(self):
        w = ls.curriculum_update(85, 100, [1.0, 1.2], ls.LossWeights())
        expect = tuple(max(m * 0.5, i) for m, i in
                       zip(ls.CURRICULUM_MAXIMA, ls.CURRICULUM_INITIAL))
        assert w.lambdas() == expect
        assert w.penalty_factor == 0.5

    def test_penalty_floors_at_initial(self):
        w = ls.LossWeights()
        hist = [1.0]
        for step in range(10):
            hist.append(hist[-1] + 0.1)
            w = ls.curriculum_update(90, 100, hist, w)
        # the first three floor at their initial values; lambda_adv's floor
        # is zero, so halving only approaches it
        assert w.lambdas()[:3] == ls.CURRICULUM_INITIAL[:3]
        assert 0.0 < w.lambda_adv < 1e-4

    def test_trajectory_bounds(self):
        w = ls.LossWeights()
        hist = []
        r = rng(17)
        for e in range(100):
            if e % 5 == 0:
                hist.append(float(r.random()))
            w = ls.curriculum_update(e, 100, hist, w)
            for lam, lo, hi in zip(w.lambdas(), ls.CURRICULUM_INITIAL,
                                   ls.CURRICULUM_MAXIMA):
                assert lo - 1e-12 <= lam <= hi + 1e-12

    def test_epoch_out_of_range(self):
        with pytest.raises(ValueError):
            ls.curriculum_update(100, 100, [], ls.LossWeights())
