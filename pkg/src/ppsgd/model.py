"""Additive linear model: prediction, squared loss, clipping, alpha geometry.

The model predicts ``(w + theta_i) . x`` for user ``i``, where ``w`` is the
global parameter shared through the server and ``theta_i`` stays on the
user's device.  All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

INFINITY = math.inf


@dataclass(frozen=True)
class SamplePoint:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class AlphaGeometry:
    """Personalization level: ratio of global to local step size.

    ``alpha == 0`` is local-only learning and ``alpha == INFINITY`` is
    global-only learning.  Both are handled as separate modes rather than
    as limits of finite values.
    """

    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if math.isnan(a) or a < 0:
            raise ConfigError(f"alpha must be >= 0 or INFINITY, got {self.alpha}")
        object.__setattr__(self, "alpha", a)

    @property
    def is_local(self) -> bool:
        return self.alpha == 0.0

    @property
    def is_global(self) -> bool:
        return math.isinf(self.alpha)


@dataclass(frozen=True)
class GroundTruth:
    theta_stars: np.ndarray  # (N, d)
    sigma_diag: np.ndarray  # (d,)
    tau: float

    def __post_init__(self):
        ts = np.asarray(self.theta_stars, dtype=np.float64)
        sd = np.asarray(self.sigma_diag, dtype=np.float64)
        if ts.ndim != 2 or sd.ndim != 1 or ts.shape[1] != sd.shape[0]:
            raise ConfigError(
                f"theta_stars {ts.shape} and sigma_diag {sd.shape} are incompatible"
            )
        if not np.all(sd > 0):
            raise ConfigError("sigma_diag entries must be strictly positive")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        object.__setattr__(self, "theta_stars", ts)
        object.__setattr__(self, "sigma_diag", sd)

    @property
    def num_users(self) -> int:
        return self.theta_stars.shape[0]

    @property
    def dim(self) -> int:
        return self.theta_stars.shape[1]


@dataclass
class ModelState:
    """Joint iterate ``z = (w, theta_1..theta_N)`` with its running average.

    The average is kept as a running sum over the iterates ``z_0 ... z_{round-1}``;
    ``avg_w`` and ``avg_thetas`` divide it by ``round``.  Before the first
    round they return the current iterate.
    """

    w: np.ndarray
    thetas: np.ndarray
    round: int = 0
    sum_w: np.ndarray = field(default=None, repr=False)
    sum_thetas: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        self.thetas = np.array(self.thetas, dtype=np.float64)
        if self.w.ndim != 1 or self.thetas.ndim != 2:
            raise ConfigError("w must be a vector and thetas an (N, d) array")
        if self.sum_w is None:
            self.sum_w = np.zeros_like(self.w)
        if self.sum_thetas is None:
            self.sum_thetas = np.zeros_like(self.thetas)

    @classmethod
    def zeros(cls, num_users: int, dim: int) -> "ModelState":
        return cls(np.zeros(dim), np.zeros((num_users, dim)))

    @property
    def num_users(self) -> int:
        return self.thetas.shape[0]

    @property
    def avg_w(self) -> np.ndarray:
        if self.round == 0:
            return self.w.copy()
        return self.sum_w / self.round

    @property
    def avg_thetas(self) -> np.ndarray:
        if self.round == 0:
            return self.thetas.copy()
        return self.sum_thetas / self.round

    def copy(self) -> "ModelState":
        return ModelState(
            self.w.copy(),
            self.thetas.copy(),
            self.round,
            self.sum_w.copy(),
            self.sum_thetas.copy(),
        )


def _check_same_dim(*vectors):
    dims = {np.shape(v)[-1] for v in vectors}
    if len(dims) != 1:
        raise ConfigError(f"dimension mismatch: {sorted(dims)}")


def predict(w, theta_i, x) -> float:
    w, theta_i, x = (np.asarray(a, dtype=np.float64) for a in (w, theta_i, x))
    if not (w.shape == theta_i.shape == x.shape) or w.ndim != 1:
        raise ConfigError(
            f"dimension mismatch: w{w.shape}, theta{theta_i.shape}, x{x.shape}"
        )
    return float(np.sum((w + theta_i) * x))


def squared_loss_grads(w, theta_i, s: SamplePoint):
    """Loss ``0.5 * (p - y)**2`` and its gradients in ``w`` and ``theta_i``.

    For the additive model both partial gradients equal ``(p - y) * x``.
    """
    x = np.asarray(s.x, dtype=np.float64)
    for name, arr in (("w", w), ("theta", theta_i), ("x", x)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite entries in {name}")
    if not math.isfinite(s.y):
        raise NumericError("non-finite label")
    residual = predict(w, theta_i, x) - float(s.y)
    g = residual * x
    return 0.5 * residual * residual, g, g.copy()


def l2_norm(v, axis=-1):
    """Euclidean norm as a plain sum of squares (no BLAS)."""
    v = np.asarray(v, dtype=np.float64)
    return np.sqrt(np.sum(v * v, axis=axis))


_SHRINK = np.nextafter(1.0, 0.0)


def clip_rows(g: np.ndarray, clip) -> np.ndarray:
    """Clip each row of ``g`` (last axis) to Euclidean norm at most ``clip``.

    ``clip`` broadcasts against ``g.shape[:-1]``.  Rows already inside the
    ball are returned bit-for-bit; scaled rows are nudged down by one ulp at
    a time until their computed norm is ``<= clip``, which makes clipping
    exactly idempotent.
    """
    g = np.asarray(g, dtype=np.float64)
    clip = np.broadcast_to(np.asarray(clip, dtype=np.float64), g.shape[:-1])
    if np.any(clip <= 0):
        raise ConfigError("clipping threshold must be positive")
    norms = l2_norm(g)
    out = g.copy()
    big = norms > clip
    if not np.any(big):
        return out
    rows = g[big] / (norms[big] / clip[big])[:, None]
    c = clip[big]
    over = l2_norm(rows) > c
    while np.any(over):
        rows[over] *= _SHRINK
        over = l2_norm(rows) > c
    out[big] = rows
    return out


def clip_to_ball(g, C: float) -> np.ndarray:
    if not C > 0:
        raise ConfigError(f"C must be positive, got {C}")
    g = np.asarray(g, dtype=np.float64)
    return clip_rows(g[None, :], C)[0]


def alpha_norm_sq(w, thetas, geom: AlphaGeometry) -> float:
    """``(1/alpha) |w|^2 + sum_i |theta_i|^2``.

    At ``alpha == 0`` the value is ``+inf`` unless ``w == 0``; at
    ``alpha == INFINITY`` the ``w`` term vanishes.
    """
    w = np.asarray(w, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    theta_sq = float(np.sum(thetas * thetas))
    w_sq = float(np.sum(w * w))
    if geom.is_global:
        return theta_sq
    if geom.is_local:
        return theta_sq if w_sq == 0.0 else math.inf
    return w_sq / geom.alpha + theta_sq


def sigma_weighted_sq(v, sigma_diag):
    """``sum_k sigma_k v_k^2`` over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    return np.sum(sigma_diag * v * v, axis=-1)


def excess_risk_arrays(w, thetas, truth: GroundTruth):
    """Closed-form excess risk for (possibly batched) iterates.

    ``w`` has shape ``(..., d)`` and ``thetas`` ``(..., N, d)``; the result has
    shape ``w.shape[:-1]``.
    """
    w = np.asarray(w, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape[-2:] != truth.theta_stars.shape or w.shape[-1] != truth.dim:
        raise ConfigError(
            f"state shapes w{w.shape}, thetas{thetas.shape} do not match "
            f"ground truth {truth.theta_stars.shape}"
        )
    diff = w[..., None, :] + thetas - truth.theta_stars
    return np.mean(sigma_weighted_sq(diff, truth.sigma_diag), axis=-1)


def population_risk_closed_form(
    state: ModelState, truth: GroundTruth, use_average: bool = False
) -> float:
    """``(1/N) sum_i |w + theta_i - theta_i*|^2_Sigma`` (label noise excluded)."""
    if use_average:
        w, thetas = state.avg_w, state.avg_thetas
    else:
        w, thetas = state.w, state.thetas
    return float(excess_risk_arrays(w, thetas, truth))
