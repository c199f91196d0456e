import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapescale.config import CATEGORY_PRESETS, category_presets
from shapescale.errors import InvalidTargetError
from shapescale.fusion import MatchingDistribution
from shapescale.msm import (CategoryLabel, MSMConfig, ShapeScaleTruth, focal_loss_multiclass,
                            focal_loss_rows, generate_category_label, msm_loss, truth_from_box)
from shapescale.tensor import softmax

CAR = category_presets("Car")


def label_oracle(r_hat, w_hat, entries, w1=2.0, w2=1.0):
    best, best_d = None, None
    for i, (r, w) in enumerate(entries):
        d = w1 * abs(r_hat - r) + w2 * abs(w_hat - w)
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


def dist_from(p):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    return MatchingDistribution(p)


class TestTruth:
    def test_square(self):
        t = truth_from_box(16, 16, 16, 16)
        assert (t.r_hat, t.w_hat) == (1.0, 2.0)

    def test_tall(self):
        t = truth_from_box(8, 8, 24, 24)
        assert (t.r_hat, t.w_hat) == (3.0, 1.0)

    def test_zero_width(self):
        with pytest.raises(InvalidTargetError):
            truth_from_box(0, 0, 5, 5)


class TestLabel:
    def test_worked_example(self):
        cfg = MSMConfig(w1=2, w2=1)
        label = generate_category_label(ShapeScaleTruth(0.9, 3.5), CAR, cfg)
        assert label.index == 2 and CAR[label.index] == (1.0, 4.0)
        s = CAR.as_array()
        d = 2 * np.abs(0.9 - s[:, 0]) + np.abs(3.5 - s[:, 1])
        np.testing.assert_allclose(d, [2.7, 1.7, 0.7, 2.7, 1.3, 5.3], atol=1e-12)
        np.testing.assert_array_equal(label.onehot, np.eye(6)[2])

    @pytest.mark.parametrize("i", range(6))
    def test_exact_preset(self, i):
        assert generate_category_label(ShapeScaleTruth(*CAR[i]), CAR).index == i

    def test_tie_goes_to_lowest_index(self):
        assert generate_category_label(ShapeScaleTruth(1.0, 3.0), CAR).index == 1

    @given(st.sampled_from(sorted(CATEGORY_PRESETS)), st.floats(0.05, 5), st.floats(0.1, 20))
    def test_matches_exhaustive_oracle(self, cat, r, w):
        presets = category_presets(cat)
        got = generate_category_label(ShapeScaleTruth(r, w), presets).index
        assert got == label_oracle(r, w, presets.entries)

    @given(st.floats(0.05, 5), st.floats(0.1, 20), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_label_minimizes_distance(self, r, w, w1, w2):
        cfg = MSMConfig(w1, w2)
        i = generate_category_label(ShapeScaleTruth(r, w), CAR, cfg).index
        s = CAR.as_array()
        d = w1 * np.abs(r - s[:, 0]) + w2 * np.abs(w - s[:, 1])
        assert d[i] == d.min() and np.all(d[:i] > d[i])


class TestFocal:
    def test_perfect(self):
        assert focal_loss_multiclass([0, 1, 0], 1) == pytest.approx(0.0, abs=1e-12)

    @given(arrays(float, 4, elements=st.floats(0.01, 1)), st.integers(0, 3))
    def test_gamma_zero_is_cross_entropy(self, raw, k):
        p = raw / raw.sum()
        assert focal_loss_multiclass(p, k, gamma=0) == pytest.approx(-math.log(p[k]), rel=1e-9)

    def test_half(self):
        assert focal_loss_multiclass([0.5, 0.5], 0, 2.0) == pytest.approx(0.25 * math.log(2), abs=1e-12)

    def test_zero_probability_is_floored(self):
        with pytest.warns(RuntimeWarning):
            v = focal_loss_multiclass([1.0, 0.0], 1)
        assert np.isfinite(v) and v > 0

    def test_row_must_sum_to_one(self):
        with pytest.raises(ValueError):
            focal_loss_multiclass([0.5, 0.6], 0)

    @given(arrays(float, (3, 5), elements=st.floats(-8, 8)), st.floats(0, 4))
    def test_nonnegative_and_below_ce(self, z, gamma):
        idx = np.array([0, 2, 4])
        losses, _ = focal_loss_rows(z, idx, gamma)
        ce = -np.log(softmax(z)[np.arange(3), idx])
        assert np.all(losses >= 0) and np.all(losses <= ce + 1e-12)


class TestMSMLoss:
    def test_all_correct(self):
        loss, _ = msm_loss(dist_from(np.eye(3)), [(0, CategoryLabel.of(0, 3)), (2, CategoryLabel.of(2, 3))])
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_single_half(self):
        loss, _ = msm_loss(dist_from([[0.5, 0.5], [0.9, 0.1]]), [(0, CategoryLabel.of(1, 2))])
        assert loss == pytest.approx(0.25 * math.log(2), abs=1e-12)

    def test_mean_of_two(self):
        p = dist_from([[0.5, 0.5], [0.2, 0.8]])
        a = focal_loss_multiclass([0.5, 0.5], 0)
        b = focal_loss_multiclass([0.2, 0.8], 1)
        loss, _ = msm_loss(p, [(0, 0), (1, 1)])
        assert loss == pytest.approx((a + b) / 2, abs=1e-12)

    def test_unlabeled_queries_get_no_gradient(self, rng):
        z = rng.normal(size=(4, 3))
        _, d = msm_loss(MatchingDistribution(softmax(z), z), [(1, 2)])
        assert np.all(d[[0, 2, 3]] == 0) and np.any(d[1] != 0)

    def test_empty_labels_warn(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loss, d = msm_loss(dist_from(np.eye(2)), [])
        assert loss == 0.0 and not d.any() and caught

    def test_out_of_range_query(self):
        with pytest.raises(IndexError):
            msm_loss(dist_from(np.eye(2)), [(5, 0)])
