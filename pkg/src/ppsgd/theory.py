"""Closed-form generalization bounds and personalization trade-off quantities.

``alpha`` follows the optimizer convention: ``0`` is local learning and
``math.inf`` is global learning.  At ``alpha = inf`` the bounds are evaluated
as their limits, which requires the minimizer's global and local norms
separately (see :class:`BoundInputs`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness ``L``, gradient bound ``G`` and gradient variances at the optimum.

    For the sampled bounds the variances are read as their minibatch-weighted
    counterparts; for the additive model ``sigma_tilde_w_m_sq`` is zero.
    """

    L: float
    G: float
    sigma_w_bar_sq: float
    sigma_theta_bar_sq: float
    d_w: int
    N: int
    sigma_tilde_w_m_sq: float = 0.0

    def __post_init__(self):
        if not (self.L > 0 and self.G > 0):
            raise ConfigError("L and G must be positive")
        if min(self.sigma_w_bar_sq, self.sigma_theta_bar_sq, self.sigma_tilde_w_m_sq) < 0:
            raise ConfigError("variances must be nonnegative")
        if self.d_w < 1 or self.N < 1:
            raise ConfigError("d_w and N must be positive")


@dataclass(frozen=True)
class BoundInputs:
    """Inputs shared by the excess-risk bounds.

    Give either ``z_star_alpha_norm`` directly or the component norms
    ``w_star_norm`` (global part) and ``theta_star_norm`` (norm of the stacked
    local parts), from which the alpha-norm is derived.  ``alpha = inf``
    needs the component norms.
    """

    constants: ProblemConstants
    alpha: float
    rounds: int
    z_star_alpha_norm: float | None = None
    w_star_norm: float | None = None
    theta_star_norm: float | None = None
    eps: float = 1.0
    delta: float = 1e-4
    q: float = 1.0
    M: int | None = None
    m_max: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.z_star_alpha_norm is None and (self.w_star_norm is None or self.theta_star_norm is None):
            raise ConfigError("need z_star_alpha_norm or both component norms")

    @property
    def radius(self) -> float:
        if self.z_star_alpha_norm is not None:
            return float(self.z_star_alpha_norm)
        return math.sqrt(alpha_norm_sq_from_parts(self.w_star_norm ** 2, self.theta_star_norm ** 2, self.alpha))


def alpha_norm_sq_from_parts(w_sq: float, theta_sq: float, alpha: float) -> float:
    if math.isinf(alpha):
        return theta_sq
    if alpha == 0:
        return theta_sq if w_sq == 0 else math.inf
    return w_sq / alpha + theta_sq


def l_alpha(L: float, alpha: float, N: int) -> float:
    return L * max(alpha, 1.0 / N)


def sigma_tot_alpha(c: ProblemConstants, alpha: float, sigma_zeta: float) -> float:
    """Total gradient noise ``sqrt((alpha sw2 + st2)/N + alpha d_w sigma_zeta^2)``."""
    return math.sqrt(
        (alpha * c.sigma_w_bar_sq + c.sigma_theta_bar_sq) / c.N + alpha * c.d_w * sigma_zeta ** 2
    )


def _global_limit_parts(b: BoundInputs):
    """``(L_alpha R^2 / L, sigma R)`` as ``alpha -> inf`` with ``theta* = 0``."""
    if b.w_star_norm is None or b.theta_star_norm is None:
        raise ConfigError("alpha = inf needs w_star_norm and theta_star_norm")
    if b.theta_star_norm > 0:
        return math.inf, math.inf
    return b.w_star_norm ** 2, b.w_star_norm


def excess_risk_bound(b: BoundInputs, sigma_zeta: float) -> float:
    """``4 L_alpha R^2 / n + 3 sigma_tot R / sqrt(n)`` for all-clients training.

    ``n`` is the number of rounds, ``R`` the alpha-norm of the minimizer.
    """
    c, n = b.constants, b.rounds
    if math.isinf(b.alpha):
        r2, r = _global_limit_parts(b)
        noise = math.sqrt(c.sigma_w_bar_sq / c.N + c.d_w * sigma_zeta ** 2)
        return 4 * c.L * r2 / n + 3 * noise * r / math.sqrt(n)
    R = b.radius
    return 4 * l_alpha(c.L, b.alpha, c.N) * R ** 2 / n + 3 * sigma_tot_alpha(c, b.alpha, sigma_zeta) * R / math.sqrt(n)


def tuned_step_size(b: BoundInputs, sigma_zeta: float) -> float:
    """``min(1 / (4 L_alpha), R / (sqrt(n) sigma_tot))``."""
    c = b.constants
    la = l_alpha(c.L, b.alpha, c.N)
    st = sigma_tot_alpha(c, b.alpha, sigma_zeta)
    cap = 1.0 / (4.0 * la)
    if st == 0:
        return cap
    return min(cap, b.radius / (math.sqrt(b.rounds) * st))


def excess_risk_bound_private(b: BoundInputs, constants=(1.0, 1.0, 1.0)) -> float:
    """Three-term bound with the calibrated privacy noise substituted.

    ``k1 L_alpha R^2/n + k2 R sqrt((alpha sw2 + st2)/(N n))
    + k3 R sqrt(alpha d_w G^2 log(1/delta)) / (N eps)``; the absolute
    constants ``(k1, k2, k3)`` are not specified and default to 1.
    """
    k1, k2, k3 = constants
    c, n = b.constants, b.rounds
    log_term = math.log(1.0 / b.delta)
    if math.isinf(b.alpha):
        r2, r = _global_limit_parts(b)
        return (
            k1 * c.L * r2 / n
            + k2 * r * math.sqrt(c.sigma_w_bar_sq / (c.N * n))
            + k3 * r * math.sqrt(c.d_w * c.G ** 2 * log_term) / (c.N * b.eps)
        )
    R = b.radius
    return (
        k1 * l_alpha(c.L, b.alpha, c.N) * R ** 2 / n
        + k2 * R * math.sqrt((b.alpha * c.sigma_w_bar_sq + c.sigma_theta_bar_sq) / (c.N * n))
        + k3 * R * math.sqrt(b.alpha * c.d_w * c.G ** 2 * log_term) / (c.N * b.eps)
    )


def l_m_alpha(L, alpha, m_max, M, q=1.0, rate_scaled=False):
    """Smoothness constant of the sampled algorithm.

    ``L max(alpha + alpha m_max / M, m_max / M)`` in the bound statement;
    ``rate_scaled=True`` uses ``q M`` in place of ``M`` as in the smoothness
    derivation (identical at ``q = 1``).
    """
    denom = q * M if rate_scaled else M
    return L * max(alpha + alpha * m_max / denom, m_max / denom)


def excess_risk_bound_sampled(b: BoundInputs, sigma_zeta: float, rate_scaled=False) -> float:
    """Bound for client sampling with the sample-weighted objective.

    ``4 L_{m,alpha} R^2 / T + 3 sigma_{m,alpha} R / sqrt(T)`` with
    ``sigma_{m,alpha}^2 = (alpha sw2 + alpha stilde2 + st2) / (q M) + alpha d_w sigma_zeta^2``.
    """
    c, T = b.constants, b.rounds
    if b.M is None:
        raise ConfigError("sampled bound needs M")
    R = b.radius
    lm = l_m_alpha(c.L, b.alpha, b.m_max, b.M, b.q, rate_scaled)
    var = (b.alpha * c.sigma_w_bar_sq + b.alpha * c.sigma_tilde_w_m_sq + c.sigma_theta_bar_sq) / (b.q * b.M)
    var += b.alpha * c.d_w * sigma_zeta ** 2
    return 4 * lm * R ** 2 / T + 3 * math.sqrt(var) * R / math.sqrt(T)


def excess_risk_bound_avg_user(b: BoundInputs, sigma_zeta: float, m_min: int) -> float:
    """Bound for client sampling with averaged minibatches (uniform objective).

    Uses ``L max(alpha + alpha/N, 1/N)`` and the upper-bounded variance
    ``(alpha sw2 + st2) / (q N m_min) + alpha stilde2 / (q N) + alpha d_w sigma_zeta^2``.
    """
    if m_min < 1:
        raise ConfigError("m_min must be >= 1")
    c, T = b.constants, b.rounds
    R = b.radius
    la = c.L * max(b.alpha + b.alpha / c.N, 1.0 / c.N)
    var = (
        (b.alpha * c.sigma_w_bar_sq + c.sigma_theta_bar_sq) / (b.q * c.N * m_min)
        + b.alpha * c.sigma_tilde_w_m_sq / (b.q * c.N)
        + b.alpha * c.d_w * sigma_zeta ** 2
    )
    return 4 * la * R ** 2 / T + 3 * math.sqrt(var) * R / math.sqrt(T)


def min_norm_minimizer(v, alpha: float, N: int):
    """Minimal alpha-norm split of a shared optimum ``v`` into ``(w, theta)``.

    Returns ``w = alpha N/(alpha N + 1) v``, ``theta_i = v/(alpha N + 1)`` and
    the alpha-norm ``sqrt(N/(alpha N + 1)) |v|``.
    """
    v = np.asarray(v, dtype=np.float64)
    vn = float(np.sqrt(np.sum(v * v)))
    if math.isinf(alpha):
        return v.copy(), np.zeros_like(v), 0.0
    s = alpha * N
    return s / (s + 1.0) * v, v / (s + 1.0), math.sqrt(N / (s + 1.0)) * vn


def min_norm_split(theta_stars, alpha: float):
    """Minimal alpha-norm ``(w, thetas)`` with ``w + theta_i = theta_stars[i]``.

    Heterogeneous generalization of :func:`min_norm_minimizer`: ``w`` is
    ``alpha N/(alpha N + 1)`` times the mean optimum.
    """
    ts = np.asarray(theta_stars, dtype=np.float64)
    N = ts.shape[0]
    mean = ts.mean(axis=0)
    if math.isinf(alpha):
        w = mean
    else:
        w = alpha * N / (alpha * N + 1.0) * mean
    return w, ts - w


def variance_term_psi(alpha, n, N, sigma, d_w, G, eps, delta, v_norm, c=1.0) -> float:
    """Variance term of the bound at the minimal-norm minimizer (homogeneous users).

    ``|v| sqrt(N/(alpha N+1) ((alpha+1) sigma^2/(N n) + c alpha d_w G^2 log(1/delta)/(N^2 eps^2)))``.
    """
    inner = (alpha + 1.0) * sigma ** 2 / (N * n) + c * alpha * d_w * G ** 2 * math.log(1.0 / delta) / (N ** 2 * eps ** 2)
    return v_norm * math.sqrt(N / (alpha * N + 1.0) * inner)


def psi_bracket(alpha, a, b, N) -> float:
    """``a(alpha+1)/(alpha N+1) + b alpha/(alpha N+1)``: the squared variance term up to ``|v|^2``."""
    return (a * (alpha + 1.0) + b * alpha) / (alpha * N + 1.0)


def psi_bracket_derivative(alpha, a, b, N) -> float:
    return (a * (1.0 - N) + b) / (alpha * N + 1.0) ** 2


def personalization_threshold(N, sigma, eps, delta, d_w, G, c=1.0) -> float:
    """Samples per user above which the variance term favors smaller alpha.

    ``N (N - 1) sigma^2 eps^2 / (c d_w G^2 log(1/delta))``.
    """
    return N * (N - 1) * sigma ** 2 * eps ** 2 / (c * d_w * G ** 2 * math.log(1.0 / delta))


def gaussian_design_smoothness(sigma_diag) -> float:
    """Smoothness constant for the additive squared loss with Gaussian features.

    Per-sample smoothness is unbounded for Gaussian ``x``; the convergence
    argument only needs it in expectation, where
    ``E[(x.u)^2 |x|^2] = (tr S + 2 u'S^2u/u'Su) u'Su <= (tr S + 2 max S) u'Su``.
    Joint gradients in ``(w, theta)`` double the squared norm, hence
    ``2 (tr S + 2 max S)``.
    """
    s = np.asarray(sigma_diag, dtype=np.float64)
    return 2.0 * (float(np.sum(s)) + 2.0 * float(np.max(s)))


def gaussian_design_variance(sigma_diag, tau: float) -> float:
    """Per-sample gradient variance at the optimum: ``tau^2 tr(Sigma)``."""
    return tau ** 2 * float(np.sum(sigma_diag))
