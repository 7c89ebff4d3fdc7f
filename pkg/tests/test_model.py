import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppsgd.errors import ConfigError, NumericError
from ppsgd.model import (
    INFINITY, AlphaGeometry, GroundTruth, ModelState, SamplePoint, alpha_norm_sq, clip_rows,
    clip_to_ball, excess_risk_arrays, l2_norm, population_risk_closed_form, predict,
    squared_loss_grads,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quarters = st.integers(-40, 40).map(lambda k: k / 4)  # exact arithmetic, no underflow


def vec(d):
    return arrays(np.float64, d, elements=finite)


class TestPredict:
    def test_zero_parameters(self):
        assert predict(np.zeros(3), np.zeros(3), np.array([1.0, -2.0, 5.0])) == 0.0

    def test_hand_dot_product(self):
        assert predict(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([2.0, 3.0])) == 5.0

    @given(vec(4), vec(4))
    def test_additive_cancellation(self, v, x):
        assert predict(v, -v, x) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            predict(np.zeros(2), np.zeros(3), np.zeros(2))


class TestSquaredLoss:
    def test_interpolation(self):
        w, th, x = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([3.0, 1.0])
        loss, gw, gt = squared_loss_grads(w, th, SamplePoint(x, predict(w, th, x)))
        assert loss == 0.0
        assert not gw.any() and not gt.any()

    def test_hand_arithmetic(self):
        loss, gw, gt = squared_loss_grads(np.zeros(2), np.zeros(2), SamplePoint(np.array([1.0, 0.0]), 2.0))
        assert loss == 2.0
        np.testing.assert_array_equal(gw, [-2.0, 0.0])
        np.testing.assert_array_equal(gt, [-2.0, 0.0])

    @given(vec(5), vec(5), vec(5), finite)
    def test_gradient_identity_is_bitwise(self, w, th, x, y):
        _, gw, gt = squared_loss_grads(w, th, SamplePoint(x, y))
        assert np.array_equal(gw, gt)
        assert gw is not gt

    @settings(max_examples=60)
    @given(vec(6), vec(6), vec(6), finite)
    def test_matches_central_differences(self, w, th, x, y):
        s = SamplePoint(x, y)
        _, gw, gt = squared_loss_grads(w, th, s)
        h = 1e-5
        for g, which in ((gw, 0), (gt, 1)):
            fd = np.empty_like(g)
            for k in range(len(w)):
                e = np.zeros_like(w)
                e[k] = h
                args_p = (w + e, th) if which == 0 else (w, th + e)
                args_m = (w - e, th) if which == 0 else (w, th - e)
                fd[k] = (squared_loss_grads(*args_p, s)[0] - squared_loss_grads(*args_m, s)[0]) / (2 * h)
            assert np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1.0) < 1e-6

    def test_non_finite_inputs(self):
        with pytest.raises(NumericError):
            squared_loss_grads(np.array([np.nan]), np.zeros(1), SamplePoint(np.ones(1), 0.0))
        with pytest.raises(NumericError):
            squared_loss_grads(np.zeros(1), np.zeros(1), SamplePoint(np.ones(1), math.inf))


class TestClip:
    def test_inside_ball_unchanged(self):
        g = np.array([0.3, -0.4])
        np.testing.assert_array_equal(clip_to_ball(g, 1.0), g)

    def test_hand_scaling(self):
        np.testing.assert_array_equal(clip_to_ball(np.array([3.0, 4.0]), 2.5), [1.5, 2.0])

    def test_zero_vector(self):
        np.testing.assert_array_equal(clip_to_ball(np.zeros(3), 0.1), np.zeros(3))

    def test_nonpositive_threshold(self):
        with pytest.raises(ConfigError):
            clip_to_ball(np.ones(2), 0.0)

    @given(arrays(np.float64, 7, elements=st.floats(-1e6, 1e6)), st.sampled_from([1e-3, 0.01, 1.0, 100.0]))
    def test_contraction_and_idempotence(self, g, C):
        out = clip_to_ball(g, C)
        assert l2_norm(out) <= C
        assert np.array_equal(clip_to_ball(out, C), out)
        n = l2_norm(g)
        if n > C:
            # direction preserved
            np.testing.assert_allclose(out * n / l2_norm(out), g, rtol=1e-12, atol=1e-300)

    def test_rows_with_broadcast_thresholds(self):
        g = np.array([[3.0, 4.0], [0.6, 0.8]])
        out = clip_rows(g, np.array([1.0, 2.0]))
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.6, 0.8]])


class TestAlphaNorm:
    def test_zero(self):
        assert alpha_norm_sq(np.zeros(2), np.zeros((3, 2)), AlphaGeometry(0.7)) == 0.0

    def test_hand_values(self):
        assert alpha_norm_sq(np.array([1.0, 1.0]), np.array([[2.0, 0.0]]), AlphaGeometry(0.5)) == 8.0
        assert alpha_norm_sq(np.array([3.0, 0.0]), np.array([[4.0, 0.0]]), AlphaGeometry(1.0)) == 25.0

    def test_special_modes(self):
        th = np.array([[1.0, 2.0]])
        assert alpha_norm_sq(np.zeros(2), th, AlphaGeometry(0.0)) == 5.0
        assert alpha_norm_sq(np.ones(2), th, AlphaGeometry(0.0)) == math.inf
        assert alpha_norm_sq(np.ones(2), th, AlphaGeometry(INFINITY)) == 5.0

    @given(vec(3).filter(lambda w: np.any(w != 0)), arrays(np.float64, (2, 3), elements=finite),
           st.floats(1e-3, 1e3), st.floats(1.01, 10))
    def test_strictly_decreasing_in_alpha(self, w, th, a, factor):
        lo = alpha_norm_sq(w, th, AlphaGeometry(a))
        hi = alpha_norm_sq(w, th, AlphaGeometry(a * factor))
        if np.sum(w * w) / a * (1 - 1 / factor) > 1e-12 * lo:
            assert hi < lo

    def test_negative_alpha_rejected(self):
        with pytest.raises(ConfigError):
            AlphaGeometry(-1.0)


class TestClosedFormRisk:
    def test_exact_recovery(self):
        ts = np.array([[1.0, 2.0], [3.0, -1.0]])
        truth = GroundTruth(ts, np.array([1.0, 0.5]), 1.0)
        state = ModelState(np.array([1.0, 0.0]), ts - np.array([1.0, 0.0]))
        assert population_risk_closed_form(state, truth) == 0.0

    def test_hand_value(self):
        truth = GroundTruth(np.zeros((1, 2)), np.array([1.0, 2.0]), 0.0)
        state = ModelState(np.array([1.0, 0.0]), np.array([[0.0, 1.0]]))
        assert population_risk_closed_form(state, truth) == 3.0

    def test_dimension_mismatch(self):
        truth = GroundTruth(np.zeros((1, 2)), np.ones(2), 0.0)
        with pytest.raises(ConfigError):
            population_risk_closed_form(ModelState(np.zeros(3), np.zeros((1, 3))), truth)

    def test_rejects_nonpositive_covariance(self):
        with pytest.raises(ConfigError):
            GroundTruth(np.zeros((1, 2)), np.array([1.0, 0.0]), 1.0)

    def test_matches_monte_carlo(self):
        # independent oracle: fresh samples drawn with numpy directly
        rng = np.random.default_rng(12345)
        N, d, tau, n = 3, 4, 0.7, 400_000
        sig = 1.0 / np.arange(1, d + 1)
        ts = rng.normal(size=(N, d))
        truth = GroundTruth(ts, sig, tau)
        state = ModelState(rng.normal(size=d), rng.normal(size=(N, d)))
        sq = []
        for i in range(N):
            X = rng.normal(size=(n, d)) * np.sqrt(sig)
            y = X @ ts[i] + tau * rng.normal(size=n)
            sq.append((y - X @ (state.w + state.thetas[i])) ** 2)
        sq = np.stack(sq)
        est = sq.mean() - tau ** 2
        se = math.sqrt(np.mean(sq.var(axis=1) / n)) / math.sqrt(N)
        assert abs(est - population_risk_closed_form(state, truth)) < 3 * se

    @given(arrays(np.float64, (3, 2), elements=quarters), arrays(np.float64, (3, 2), elements=quarters))
    def test_nonnegative_and_zero_iff_recovered(self, u, ts):
        truth = GroundTruth(ts, np.array([1.0, 0.5]), 0.0)
        r = population_risk_closed_form(ModelState(np.zeros(2), u), truth)
        assert r >= 0
        assert (r == 0) == bool(np.all(u == ts))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        truth = GroundTruth(rng.normal(size=(4, 3)), np.array([1.0, 0.5, 0.25]), 1.0)
        W, TH = rng.normal(size=(5, 3)), rng.normal(size=(5, 4, 3))
        batch = excess_risk_arrays(W, TH, truth)
        for e in range(5):
            assert batch[e] == population_risk_closed_form(ModelState(W[e], TH[e]), truth)


class TestModelState:
    def test_average_before_first_round_is_iterate(self):
        s = ModelState(np.ones(2), np.zeros((1, 2)))
        np.testing.assert_array_equal(s.avg_w, s.w)

    def test_copy_is_deep(self):
        s = ModelState.zeros(2, 3)
        c = s.copy()
        c.w[0] = 1.0
        assert s.w[0] == 0.0
