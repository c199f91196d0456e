import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shapescale.errors import CapacityError, InvalidTargetError, NumericalGuardError
from shapescale.losses import (TERM_NAMES, LossWeights, ObjectTarget, PredictionHeads, QueryPrediction,
                               depth_components, geometric_depth, giou_loss, giou_loss_and_grad,
                               laplacian_depth_grad, laplacian_depth_loss, match_queries, query_loss,
                               total_loss)
from shapescale.sampling import FeatureMap
from shapescale.tensor import grad_check, softmax

IMAGE = (256, 256)


def target(center=(100.0, 120.0), lrtb=(20, 20, 15, 15), depth=20.0, h3d=1.5, cls=0, angle=0.3):
    return ObjectTarget(class_id=cls, box_lrtb=lrtb, center3d_proj=center, size3d=[h3d, 1.6, 3.9],
                        depth=depth, angle=angle, focal_length=700.0)


def prediction(n, n_classes=2, **overrides):
    base = dict(class_logits=np.zeros((n, n_classes + 1)), box_lrtb=np.full((n, 4), 10.0),
                center3d_proj=np.full((n, 2), 50.0), d_reg=np.full(n, 20.0), log_sigma=np.zeros(n),
                size3d=np.tile([1.5, 1.6, 3.9], (n, 1)), angle_sincos=np.tile([0.0, 1.0], (n, 1)))
    base.update({k: np.asarray(v, dtype=float) for k, v in overrides.items()})
    return QueryPrediction(**base)


def const_map(value, size=16, c=3):
    return FeatureMap(np.full((size, size, c), float(value)), 16)


class TestDepth:
    def test_geometric(self):
        assert geometric_depth(700, 1.5, 75, 75) == pytest.approx(7.0, abs=1e-12)

    def test_geometric_guard(self):
        with pytest.raises(NumericalGuardError):
            geometric_depth(700, 1.5, 0, 0)

    def test_components_mean(self):
        # d_reg=6, d_geo=7 (t+b=150), d_map=8
        pred = prediction(1, box_lrtb=[[10, 10, 75, 75]], d_reg=[6.0], center3d_proj=[[100, 100]])
        d_reg, d_geo, d_map, d_pre = depth_components(pred, target(), const_map(8.0))
        assert (d_reg, d_map) == (6.0, 8.0)
        assert d_geo == pytest.approx(7.0, abs=1e-12)
        assert d_pre == pytest.approx(7.0, abs=1e-12)

    def test_components_constant(self):
        c = 7.0
        pred = prediction(1, box_lrtb=[[10, 10, 75, 75]], d_reg=[c], center3d_proj=[[30, 200]])
        assert depth_components(pred, target(), const_map(c))[3] == pytest.approx(c, abs=1e-12)

    def test_laplacian_values(self):
        assert laplacian_depth_loss(5.0, 5.0, 0.0) == 0.0
        assert abs(laplacian_depth_loss(3.0, 4.0, math.log(2.0)) - (1 + math.log(2))) <= 1e-12

    @given(st.floats(0.01, 50), st.floats(-50, 50))
    def test_sigma_star_is_stationary(self, delta, d_gt):
        ls_star = math.log(2 * delta)
        _, g_ls = laplacian_depth_grad(d_gt - delta, d_gt, ls_star)
        assert abs(g_ls) <= 1e-9
        at = laplacian_depth_loss(d_gt - delta, d_gt, ls_star)
        for step in (-0.1, 0.1):
            assert laplacian_depth_loss(d_gt - delta, d_gt, ls_star + step) > at

    def test_sigma_star_grad_check(self):
        delta = 1.5

        def op(ls):
            v = laplacian_depth_loss(0.0, delta, float(ls[0]))
            return v, [np.array([laplacian_depth_grad(0.0, delta, float(ls[0]))[1]])]

        x = np.array([math.log(2 * delta)])
        assert grad_check(op, [x], 1e-5) < 1e-4
        assert abs(op(x)[1][0][0]) < 1e-12


class TestGIoU:
    def test_identical(self):
        assert giou_loss([3, 4, 5, 6], [3, 4, 5, 6]) == pytest.approx(0.0, abs=1e-15)

    def test_disjoint(self):
        # pred spans x in [5, 7], target [-1, 1]; union 8, enclosure 8x2 = 16
        assert giou_loss([-5, 7, 1, 1], [1, 1, 1, 1]) == pytest.approx(1.5, abs=1e-12)

    def test_disjoint_small_gap(self):
        assert giou_loss([-2, 4, 1, 1], [1, 1, 1, 1]) == pytest.approx(1.2, abs=1e-12)

    def test_containing(self):
        assert giou_loss([2, 2, 2, 2], [1, 1, 1, 1]) == pytest.approx(0.75, abs=1e-12)

    def test_degenerate_prediction(self):
        # zero-area prediction: IoU 0, union = target area, enclosure covers both
        loss, grad = giou_loss_and_grad(np.array([[0.0, 0.0, 2.0, 2.0]]), np.array([[1.0, 1, 1, 1]]))
        assert loss[0] == pytest.approx(1 + (8 - 4) / 8, abs=1e-12)
        assert np.all(np.isfinite(grad))

    @given(st.lists(st.floats(0.5, 20), min_size=8, max_size=8))
    def test_range(self, v):
        loss = giou_loss(v[:4], v[4:])
        assert -1e-12 <= loss <= 2.0


class TestMatcher:
    def test_zero_distance(self):
        pos = np.random.default_rng(0).uniform(0, 1, (10, 2))
        t = target(center=tuple(pos[7] * IMAGE), lrtb=(10, 10, 10, 10))
        assert match_queries(pos, [t], IMAGE) == [(7, 0)]

    def test_zero_targets(self):
        assert match_queries(np.zeros((3, 2)), [], IMAGE) == []

    def test_capacity(self):
        with pytest.raises(CapacityError):
            match_queries(np.zeros((1, 2)), [target(), target()], IMAGE)

    def test_swapped_centers_against_exhaustive_oracle(self):
        t0 = target(center=(60.0, 60.0), lrtb=(30, 30, 30, 30))
        t1 = target(center=(200.0, 180.0), lrtb=(10, 10, 10, 10))
        pos = np.array([[200.0, 180.0], [60.0, 60.0]]) / IMAGE
        got = match_queries(pos, [t0, t1], IMAGE)

        def cost(assign):
            return sum(np.linalg.norm(pos[q] - [t0, t1][t].center2d / IMAGE) for q, t in assign)

        best = min((list(zip(perm, range(2))) for perm in itertools.permutations(range(2))), key=cost)
        assert got == sorted(best) == [(0, 1), (1, 0)]

    def test_larger_target_chooses_first(self):
        small = target(center=(100.0, 100.0), lrtb=(5, 5, 5, 5))
        big = target(center=(120.0, 100.0), lrtb=(40, 40, 40, 40))
        pos = np.array([[110.0, 100.0], [250.0, 250.0]]) / IMAGE
        assert match_queries(pos, [small, big], IMAGE) == [(0, 1), (1, 0)]

    @given(st.integers(0, 2 ** 31), st.integers(0, 6))
    def test_one_to_one(self, seed, m):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(0, 1, (6, 2))
        ts = [target(center=tuple(rng.uniform(20, 230, 2)), lrtb=tuple(rng.uniform(2, 20, 4))) for _ in range(m)]
        matches = match_queries(pos, ts, IMAGE)
        assert sorted(t for _, t in matches) == list(range(m))
        assert len({q for q, _ in matches}) == m


class TestTarget:
    def test_degenerate(self):
        with pytest.raises(InvalidTargetError):
            target(lrtb=(0, 0, 5, 5))

    def test_nonpositive_depth(self):
        with pytest.raises(InvalidTargetError):
            target(depth=0.0)


def perfect_setup():
    t = target(center=(100.0, 120.0), lrtb=(20, 20, 15, 15), depth=20.0, h3d=20.0 * 30 / 700, angle=0.3)
    pred = prediction(2, class_logits=[[50.0, 0, 0], [0, 0, 50.0]], box_lrtb=[[20, 20, 15, 15], [5, 5, 5, 5]],
                      center3d_proj=[[100, 120], [10, 10]], d_reg=[20.0, 1.0], log_sigma=[0.0, 0.0],
                      size3d=[t.size3d, [1, 1, 1]], angle_sincos=[[math.sin(0.3), math.cos(0.3)], [0, 1]])
    return [(0, 0)], pred, [t], const_map(20.0)


class TestQueryLoss:
    def test_perfect_predictions(self):
        res = query_loss(*perfect_setup())
        assert all(abs(v) <= 1e-6 for v in res.terms.values())
        assert res.total <= 1e-5

    def test_class_only(self):
        matches, pred, ts, dmap = perfect_setup()
        pred.box_lrtb[0] += 3.0
        only = query_loss(matches, pred, ts, dmap, LossWeights((2.0, 0, 0, 0, 0, 0, 0)))
        full = query_loss(matches, pred, ts, dmap)
        assert only.total == pytest.approx(2.0 * full.terms["class"], abs=1e-15)

    def test_hand_computed_sum(self):
        t = target(center=(100.0, 120.0), lrtb=(20, 20, 15, 15), depth=20.0, h3d=1.5, angle=0.0)
        dmap = const_map(18.0)
        logits = np.array([[1.0, 0.0, -1.0]])
        pred = prediction(1, class_logits=logits, box_lrtb=[[22, 19, 15, 15]],
                          center3d_proj=[[104, 120]], d_reg=[21.0], log_sigma=[0.5],
                          size3d=[[1.5, 1.8, 3.9]], angle_sincos=[[0.2, 0.9]])
        res = query_loss([(0, 0)], pred, [t], dmap)
        p = softmax(logits)[0, 0]
        hand = {
            "class": -(1 - p) ** 2 * math.log(p),
            "2dsize": (2 + 1) / 256,
            "xy3d": 4 / 256,
            # x spans [-22, 19] vs [-20, 20]: overlap 39, union 42 = enclosure
            "giou": 1 - 39 / 42,
            "3dsize": 0.2,
            "angle": 0.2 + 0.1,
        }
        d_pre = (21.0 + 700 * 1.5 / 30 + 18.0) / 3
        hand["depth"] = 2 / math.exp(0.5) * abs(20.0 - d_pre) + 0.5
        for k in TERM_NAMES:
            assert res.terms[k] == pytest.approx(hand[k], abs=1e-12), k
        lam = dict(zip(TERM_NAMES, LossWeights().lambdas))
        assert res.total == pytest.approx(sum(lam[k] * hand[k] for k in TERM_NAMES), abs=1e-12)

    def test_no_matches_only_classification(self):
        _, pred, ts, dmap = perfect_setup()
        res = query_loss([], pred, ts, dmap)
        assert all(res.terms[k] == 0 for k in TERM_NAMES[1:]) and res.terms["class"] > 0

    def test_linear_in_weights(self):
        matches, pred, ts, dmap = perfect_setup()
        pred.d_reg[0] = 25.0
        pred.size3d[0, 1] += 0.5
        a = query_loss(matches, pred, ts, dmap, LossWeights((1, 2, 3, 4, 5, 6, 7)))
        b = query_loss(matches, pred, ts, dmap, LossWeights((2, 4, 6, 8, 10, 12, 14)))
        assert b.total == pytest.approx(2 * a.total, rel=1e-12)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights((1, 1, 1))
        with pytest.raises(ValueError):
            LossWeights(lambda_msm=-0.1)


class TestTotal:
    def test_examples(self):
        assert total_loss(3.0, 2.0, 0.0) == 3.0
        assert total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2, abs=1e-15)
        assert total_loss(0.0, 0.0, 0.5) == 0.0


class TestHeads:
    def test_box_positive_and_center_offset(self, rng):
        heads = PredictionHeads(8, 2, rng)
        pos = rng.uniform(0, 1, (4, 2))
        pred, _ = heads.forward(rng.normal(size=(4, 8)), pos, (320, 160))
        assert pred.class_logits.shape == (4, 3)
        assert np.all(pred.box_lrtb > 0) and np.all(pred.box_lrtb[:, :2] < 320)
        zero = PredictionHeads(8, 2)
        pred0, _ = zero.forward(rng.normal(size=(4, 8)), pos, (320, 160))
        np.testing.assert_allclose(pred0.center3d_proj, pos * [320, 160])
        np.testing.assert_allclose(pred0.d_reg, 30.0)
