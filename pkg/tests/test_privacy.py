import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ppsgd.errors import ConfigError, ParameterError
from ppsgd.privacy import (
    DEFAULT_ORDERS, AccountantState, MechanismSpec, accountant_step, calibrate_sigma_full_participation,
    calibrate_sigma_sampled, epsilon_at, epsilon_for, epsilon_trace, find_calibration_constant,
    noise_std_from_sigma, rdp_curve, rdp_gaussian, rdp_subsampled_gaussian, sigma_from_noise_std,
)


def renyi_by_quadrature(order, sigma, q=1.0):
    """Renyi divergence of (1-q) N(0, s^2) + q N(1, s^2) from N(0, s^2), numerically."""
    s2 = 2 * sigma * sigma

    def integrand(x):
        log_p0 = -x * x / s2
        log_mix = np.logaddexp(math.log1p(-q) + log_p0 if q < 1 else -np.inf, math.log(q) - (x - 1) ** 2 / s2)
        return math.exp(order * log_mix + (1 - order) * log_p0)

    lo, hi = -40 * sigma, order + 40 * sigma
    val, _ = integrate.quad(integrand, lo, hi, points=[0.0, 1.0, float(order)], epsabs=0, epsrel=1e-13, limit=400)
    return math.log(val / (sigma * math.sqrt(2 * math.pi))) / (order - 1)


class TestCalibration:
    def test_full_participation_hand_value(self):
        # sqrt(100 * 4) / 10 = 2
        assert calibrate_sigma_full_participation(1.0, 100, 10, 1.0, math.exp(-4)) == pytest.approx(2.0, rel=1e-15)

    def test_full_participation_scalings(self):
        base = calibrate_sigma_full_participation(1.0, 100, 10, 1.0, 1e-4)
        assert calibrate_sigma_full_participation(2.0, 100, 10, 1.0, 1e-4) == pytest.approx(2 * base)
        assert calibrate_sigma_full_participation(1.0, 400, 10, 1.0, 1e-4) == pytest.approx(2 * base)
        assert calibrate_sigma_full_participation(1.0, 100, 20, 1.0, 1e-4) == pytest.approx(base / 2)
        assert calibrate_sigma_full_participation(1.0, 100, 10, 2.0, 1e-4) == pytest.approx(base / 2)
        assert calibrate_sigma_full_participation(1.0, 100, 10, 1.0, 1e-4, c=3.0) == pytest.approx(3 * base)

    def test_sampled_hand_value(self):
        cal = calibrate_sigma_sampled(1.0, 100, 10, 1.0, math.exp(-4))
        assert cal.sigma_zeta == pytest.approx(2.0, rel=1e-15)
        assert cal.precondition_ok

    def test_sampled_precondition_flag(self):
        # c1 q^2 T = 0.25 is below eps = 1
        assert not calibrate_sigma_sampled(1.0, 100, 10, 1.0, 1e-4, q=0.05).precondition_ok
        assert calibrate_sigma_sampled(1.0, 100, 10, 1.0, 1e-4, q=0.5).precondition_ok

    def test_noise_multiplier_round_trip(self):
        s = sigma_from_noise_std(0.3, 2.0, 50.0)
        assert s == pytest.approx(7.5)
        assert noise_std_from_sigma(s, 2.0, 50.0) == pytest.approx(0.3)

    @pytest.mark.parametrize("kw", [dict(eps=0.0), dict(delta=0.0), dict(delta=1.0), dict(C=0.0)])
    def test_bad_inputs(self, kw):
        args = dict(C=1.0, n=10, N=5, eps=1.0, delta=1e-4)
        args.update(kw)
        with pytest.raises(ParameterError):
            calibrate_sigma_full_participation(**args)

    def test_sampled_bad_rate(self):
        with pytest.raises(ParameterError):
            calibrate_sigma_sampled(1.0, 10, 5, 1.0, 1e-4, q=0.0)


class TestRdp:
    def test_gaussian_hand_values(self):
        assert rdp_gaussian(2.0, 3.0) == 0.375
        assert rdp_gaussian(1.0, 2.0) == 1.0

    @pytest.mark.parametrize("sigma,order", [(1.0, 2.0), (2.0, 3.0), (0.8, 1.5), (3.0, 7.0)])
    def test_gaussian_matches_quadrature(self, sigma, order):
        assert rdp_gaussian(sigma, order) == pytest.approx(renyi_by_quadrature(order, sigma), rel=1e-8)

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 4.0])
    @pytest.mark.parametrize("order", [2, 3, 17, 200])
    def test_full_rate_equals_gaussian(self, sigma, order):
        assert abs(rdp_subsampled_gaussian(1.0, sigma, order) - rdp_gaussian(sigma, order)) <= 1e-9

    def test_zero_rate_is_free(self):
        assert rdp_subsampled_gaussian(0.0, 1.0, 5) == 0.0

    def test_small_rate_against_quadrature(self):
        q, sigma, order = 0.01, 1.0, 2
        bound = rdp_subsampled_gaussian(q, sigma, order)
        oracle = renyi_by_quadrature(order, sigma, q)
        assert bound >= oracle - 1e-12
        assert bound <= 2 * q * q * order / sigma ** 2

    @pytest.mark.parametrize("q,sigma,order", [(0.1, 1.0, 3), (0.3, 2.0, 4), (0.05, 0.8, 2)])
    def test_integer_orders_match_mixture_divergence(self, q, sigma, order):
        # at integer orders the binomial expansion is the exact divergence
        assert rdp_subsampled_gaussian(q, sigma, order) == pytest.approx(
            renyi_by_quadrature(order, sigma, q), rel=1e-7)

    def test_fractional_order_rejected(self):
        with pytest.raises(ParameterError):
            rdp_subsampled_gaussian(0.1, 1.0, 2.5)

    def test_curve_uses_ceiling_order_when_sampled(self):
        c = rdp_curve(0.1, 1.0, (1.5, 2.0, 2.5, 3.0))
        assert c[0] == c[1] and c[2] == c[3]

    @pytest.mark.parametrize("args", [(1.0, 1.0), (0.0, 2.0), (-1.0, 2.0)])
    def test_gaussian_bad_inputs(self, args):
        with pytest.raises(ParameterError):
            rdp_gaussian(*args)

    def test_subsampled_bad_inputs(self):
        with pytest.raises(ParameterError):
            rdp_subsampled_gaussian(1.5, 1.0, 2)
        with pytest.raises(ParameterError):
            rdp_subsampled_gaussian(0.5, 1.0, 1)


class TestAccountant:
    def test_zero_steps(self):
        eps = epsilon_at(AccountantState(), 1e-4)
        assert eps == pytest.approx(math.log(1e4) / (max(DEFAULT_ORDERS) - 1), rel=1e-12)

    def test_composition_is_additive(self):
        mech = MechanismSpec(1.3, 0.2)
        once = accountant_step(AccountantState(), mech, 50)
        twice = accountant_step(once, mech, 50)
        assert np.array_equal(twice.rdp_accum, 2 * once.rdp_accum)
        assert twice.steps == 100 and len(twice.events) == 1

    def test_full_rate_accumulation_closed_form(self):
        orders = (1.5, 2.0, 8.0)
        state = accountant_step(AccountantState(orders), MechanismSpec(2.0, 1.0), 30)
        np.testing.assert_allclose(state.rdp_accum, [30 * a / 8 for a in orders], rtol=1e-15)

    def test_mixed_mechanisms(self):
        a, b = MechanismSpec(1.0, 0.1), MechanismSpec(3.0, 1.0)
        state = accountant_step(accountant_step(AccountantState(), a, 4), b, 2)
        expected = 4 * rdp_curve(0.1, 1.0) + 2 * rdp_curve(1.0, 3.0)
        np.testing.assert_allclose(state.rdp_accum, expected, rtol=1e-14)

    def test_trace_matches_single_calls(self):
        rounds = [1, 10, 250]
        trace = epsilon_trace(1.1, 0.05, rounds, 1e-5)
        for t, e in zip(rounds, trace):
            assert e == pytest.approx(epsilon_for(1.1, 0.05, t, 1e-5), rel=1e-12)

    def test_single_step_near_continuous_optimum(self):
        # min over real orders of a/2 + L/(a-1) is 1/2 + sqrt(2 L)
        L = math.log(1e4)
        oracle = 0.5 + math.sqrt(2 * L)
        eps = epsilon_for(1.0, 1.0, 1, 1e-4)
        assert oracle <= eps <= oracle * 1.01

    def test_no_noise_is_not_private(self):
        assert epsilon_for(0.0, 0.5, 10) == math.inf
        assert np.all(np.isinf(epsilon_trace(0.0, 0.5, [1, 2])))

    def test_bad_inputs(self):
        with pytest.raises(ParameterError):
            MechanismSpec(0.0)
        with pytest.raises(ParameterError):
            MechanismSpec(1.0, 1.5)
        with pytest.raises(ParameterError):
            accountant_step(AccountantState(), MechanismSpec(1.0), -1)
        with pytest.raises(ConfigError):
            AccountantState(orders=(1.0, 2.0))
        with pytest.raises(ParameterError):
            epsilon_at(AccountantState(), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.6, 5.0), st.floats(1.01, 3.0), st.floats(0.01, 1.0), st.integers(1, 2000))
    def test_monotone_in_sigma(self, sigma, factor, q, T):
        assert epsilon_for(sigma * factor, q, T) <= epsilon_for(sigma, q, T) * (1 + 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.6, 5.0), st.floats(0.01, 1.0), st.integers(1, 2000), st.integers(1, 2000))
    def test_monotone_in_steps(self, sigma, q, T, extra):
        assert epsilon_for(sigma, q, T) <= epsilon_for(sigma, q, T + extra) * (1 + 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.6, 5.0), st.floats(0.01, 0.9), st.floats(1.01, 10.0), st.integers(1, 2000))
    def test_monotone_in_rate(self, sigma, q, factor, T):
        q2 = min(1.0, q * factor)
        assert epsilon_for(sigma, q, T) <= epsilon_for(sigma, q2, T) * (1 + 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.6, 5.0), st.floats(0.01, 1.0), st.integers(1, 2000), st.floats(-8, -1), st.floats(0.1, 3))
    def test_monotone_in_delta(self, sigma, q, T, log_delta, gap):
        small, large = 10 ** (log_delta - gap), 10 ** log_delta
        assert epsilon_for(sigma, q, T, large) <= epsilon_for(sigma, q, T, small) * (1 + 1e-12)


class TestCalibrationConstant:
    def test_matches_continuous_order_optimum(self):
        # with every order available, eps(sigma) = T/(2 s^2) + sqrt(2 T L)/s where L = log(1/delta);
        # setting sigma = c sqrt(T L)/eps and solving eps(sigma) = eps gives
        # c = (sqrt 2 + sqrt(2 + 2 eps / L)) / 2
        n, eps, delta = 1000, 1.0, 1e-5
        L = math.log(1 / delta)
        oracle = (math.sqrt(2) + math.sqrt(2 + 2 * eps / L)) / 2
        c = find_calibration_constant(n, eps, delta)
        assert oracle <= c <= oracle * 1.01

    def test_certifies_budget(self):
        n, eps, delta = 200, 2.0, 1e-4
        c = find_calibration_constant(n, eps, delta)
        base = math.sqrt(n * math.log(1 / delta)) / eps
        assert epsilon_for(c * base, 1.0, n, delta) <= eps
        assert epsilon_for((c - 1e-4) * base, 1.0, n, delta) > eps

    def test_unreachable_budget(self):
        with pytest.raises(ParameterError):
            find_calibration_constant(10, 1.0, 1e-4, hi=0.01)
