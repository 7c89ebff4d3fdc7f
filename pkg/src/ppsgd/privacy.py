"""Noise calibration and a Renyi-DP accountant for the subsampled Gaussian mechanism.

The accountant models one server round as the release of
``sum_i clipped_i + N(0, (sigma * C)^2 I)`` where each clipped contribution
has norm at most ``C``, with clients included by Poisson sampling at rate
``q``.  In the training loops the server divides that sum by a normalizer
(``N``, ``q M`` or ``q N``), so a per-coordinate server noise ``noise_std``
corresponds to the noise multiplier ``sigma = normalizer * noise_std / C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConfigError, ParameterError


def _default_orders():
    fractional = np.round(1.0 + np.geomspace(1e-3, 8.0, 80), 6)
    fractional = fractional[fractional != np.round(fractional)]
    integers = np.arange(2, 513)
    tail = np.unique(np.round(np.geomspace(512, 10_000, 60)).astype(int))
    return tuple(sorted(set(fractional.tolist()) | set(float(k) for k in integers) | set(float(k) for k in tail)))


#: Default Renyi orders: a geometric fractional grid on [1.001, 9], every
#: integer 2..512, then roughly 5% steps up to 10000.  The subsampled bound
#: rises sharply past an order near ``2 sigma^2 log(1/q)``, and the optimum
#: often sits just below it, hence unit spacing there.
DEFAULT_ORDERS = _default_orders()
DEFAULT_DELTA = 1e-4


def sigma_from_noise_std(noise_std: float, clip: float, normalizer: float) -> float:
    """Accountant noise multiplier for a given per-coordinate server noise."""
    return normalizer * noise_std / clip


def noise_std_from_sigma(sigma: float, clip: float, normalizer: float) -> float:
    return sigma * clip / normalizer


@dataclass(frozen=True)
class NoiseCalibration:
    sigma_zeta: float
    clip: float
    constant_c: float = 1.0
    precondition_ok: bool = True

    def __post_init__(self):
        if self.sigma_zeta < 0:
            raise ParameterError("sigma_zeta must be nonnegative")


def _check_budget(eps, delta):
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")


def calibrate_sigma_full_participation(C, n, N, eps, delta, c=1.0) -> float:
    """Noise std making all-clients training ``(eps, delta)``-private.

    ``c * C * sqrt(n log(1/delta)) / (N eps)`` with ``c`` the unspecified
    absolute constant (configurable).
    """
    _check_budget(eps, delta)
    if not (C > 0 and n > 0 and N > 0 and c > 0):
        raise ParameterError("C, n, N and c must be positive")
    return c * C * math.sqrt(n * math.log(1.0 / delta)) / (N * eps)


def calibrate_sigma_sampled(C, T, M, eps, delta, c2=1.0, q=1.0, c1=1.0) -> NoiseCalibration:
    """Noise std for client-sampled training, ``c2 C sqrt(T log(1/delta)) / (M eps)``.

    The guarantee needs ``eps < c1 q^2 T``; when that fails the result is
    still returned with ``precondition_ok=False``.
    """
    _check_budget(eps, delta)
    if not (C > 0 and T > 0 and M > 0 and c2 > 0 and c1 > 0):
        raise ParameterError("C, T, M, c1 and c2 must be positive")
    if not 0 < q <= 1:
        raise ParameterError(f"q must lie in (0, 1], got {q}")
    s = c2 * C * math.sqrt(T * math.log(1.0 / delta)) / (M * eps)
    return NoiseCalibration(s, C, c2, precondition_ok=eps < c1 * q * q * T)


def rdp_gaussian(sigma: float, order: float) -> float:
    """Renyi divergence of order ``order`` for the unit-sensitivity Gaussian mechanism."""
    if not order > 1:
        raise ParameterError(f"Renyi order must exceed 1, got {order}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if math.isinf(sigma):
        return 0.0
    return order / (2.0 * sigma * sigma)


def rdp_subsampled_gaussian(q: float, sigma: float, order: int) -> float:
    """RDP of the Poisson-subsampled Gaussian at an integer order.

    ``log(sum_j C(order, j) (1-q)^(order-j) q^j exp(j(j-1)/(2 sigma^2))) / (order-1)``,
    evaluated in log space.
    """
    if isinstance(order, float) and not order.is_integer():
        raise ParameterError(f"order must be an integer, got {order}")
    order = int(order)
    if order < 2:
        raise ParameterError(f"order must be an integer >= 2, got {order}")
    if not 0 <= q <= 1:
        raise ParameterError(f"q must lie in [0, 1], got {q}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if q == 0 or math.isinf(sigma):
        return 0.0
    if q == 1:
        return rdp_gaussian(sigma, order)
    j = np.arange(order + 1, dtype=np.float64)
    log_terms = (
        gammaln(order + 1.0) - gammaln(j + 1.0) - gammaln(order - j + 1.0)
        + j * math.log(q) + (order - j) * math.log1p(-q)
        + j * (j - 1.0) / (2.0 * sigma * sigma)
    )
    return max(0.0, float(logsumexp(log_terms)) / (order - 1))


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-step RDP at every order of ``orders``.

    With ``q == 1`` every order is exact.  With ``q < 1`` fractional orders
    take the value at the next integer order (Renyi divergence is
    nondecreasing in the order), capped by the unsampled Gaussian value at
    the same order (sampling never increases the divergence).
    """
    out = np.empty(len(orders))
    cache = {}
    for k, a in enumerate(orders):
        if q == 1 or math.isinf(sigma):
            out[k] = rdp_gaussian(sigma, a)
            continue
        ia = max(2, math.ceil(a))
        if ia not in cache:
            cache[ia] = rdp_subsampled_gaussian(q, sigma, ia)
        out[k] = min(cache[ia], rdp_gaussian(sigma, a))
    return out


@dataclass(frozen=True)
class MechanismSpec:
    noise_multiplier: float
    sampling_rate: float = 1.0

    def __post_init__(self):
        if not self.noise_multiplier > 0:
            raise ParameterError("noise multiplier must be positive")
        if not 0 < self.sampling_rate <= 1:
            raise ParameterError("sampling rate must lie in (0, 1]")


@dataclass(frozen=True)
class AccountantState:
    """Composition of mechanisms, each with a repetition count.

    ``rdp_accum`` is ``sum_mech count * rdp(mech)`` at every order, so ``T``
    identical steps give exactly ``T`` times the single-step value.
    """

    orders: tuple = DEFAULT_ORDERS
    events: tuple = ()  # ((MechanismSpec, count), ...)
    steps: int = 0
    _curves: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        if any(a <= 1 for a in orders):
            raise ConfigError("Renyi orders must exceed 1")
        object.__setattr__(self, "orders", orders)

    def _curve(self, mech: MechanismSpec) -> np.ndarray:
        if mech not in self._curves:
            self._curves[mech] = rdp_curve(mech.sampling_rate, mech.noise_multiplier, self.orders)
        return self._curves[mech]

    @property
    def rdp_accum(self) -> np.ndarray:
        acc = np.zeros(len(self.orders))
        for mech, count in self.events:
            acc = acc + count * self._curve(mech)
        return acc


def accountant_step(state: AccountantState, mech: MechanismSpec, count: int = 1) -> AccountantState:
    """Compose ``count`` more applications of ``mech``."""
    if count < 0:
        raise ParameterError("count must be nonnegative")
    events = list(state.events)
    for k, (m, c) in enumerate(events):
        if m == mech:
            events[k] = (m, c + count)
            break
    else:
        events.append((mech, count))
    return AccountantState(state.orders, tuple(events), state.steps + count, state._curves)


def epsilon_from_rdp(rdp, orders, delta: float) -> float:
    if len(orders) == 0:
        raise ConfigError("empty Renyi order grid")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=np.float64)
    return float(np.min(np.asarray(rdp) + math.log(1.0 / delta) / (orders - 1.0)))


def epsilon_at(state: AccountantState, delta: float = DEFAULT_DELTA) -> float:
    """``min_order rdp_accum[order] + log(1/delta) / (order - 1)``."""
    return epsilon_from_rdp(state.rdp_accum, state.orders, delta)


def epsilon_for(sigma: float, q: float, steps: int, delta: float = DEFAULT_DELTA, orders=DEFAULT_ORDERS) -> float:
    """Epsilon after ``steps`` rounds of the (subsampled) Gaussian mechanism.

    ``sigma == 0`` means no noise and returns ``inf``.
    """
    if sigma == 0:
        return math.inf
    st = accountant_step(AccountantState(orders), MechanismSpec(sigma, q), steps)
    return epsilon_at(st, delta)


def epsilon_trace(sigma: float, q: float, rounds, delta: float = DEFAULT_DELTA, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Epsilon after each entry of ``rounds`` for a fixed mechanism."""
    rounds = np.asarray(rounds)
    if sigma == 0:
        return np.full(rounds.shape, math.inf)
    curve = rdp_curve(q, sigma, orders)
    return np.array([epsilon_from_rdp(int(t) * curve, orders, delta) for t in rounds])


def find_calibration_constant(n, eps, delta, orders=DEFAULT_ORDERS, tol=1e-6, hi=64.0):
    """Smallest ``c`` for which the closed-form all-clients calibration is
    certified ``(eps, delta)``-private by the accountant, found by bisection.

    With ``noise_std = c C sqrt(n log(1/delta)) / (N eps)`` and normalizer
    ``N`` the accountant sees ``sigma = c sqrt(n log(1/delta)) / eps``
    independently of ``C`` and ``N``.
    """
    _check_budget(eps, delta)
    base = math.sqrt(n * math.log(1.0 / delta)) / eps

    def ok(c):
        return epsilon_for(c * base, 1.0, n, delta, orders) <= eps

    lo = 0.0
    if not ok(hi):
        raise ParameterError(f"no calibration constant below {hi} reaches eps={eps}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid > 0 and ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
