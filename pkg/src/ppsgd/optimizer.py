"""Personalized private federated SGD training loops.

Three algorithms share one engine:

* ``ALG1``: every client participates each round, minibatch gradients are
  averaged, local step ``eta / N``, server normalizer ``N``.
* ``ALG2``: clients sampled per round (Bernoulli ``q`` or ``Q`` without
  replacement), minibatch gradients are summed, local step ``eta / (q M)``,
  server normalizer ``q M`` with ``M = sum_i m_i``.  Optimizes the
  sample-weighted objective.
* ``ALG3``: as ``ALG2`` but minibatch gradients are averaged and both
  normalizers are ``q N``.  Optimizes the unweighted average-user objective.

The global step is ``alpha * eta`` (``eta`` when ``alpha`` is infinite, in
which case local updates are skipped); with ``alpha == 0`` the global
parameter never moves.

The engine runs a batch of *replicas* -- hyperparameter settings that differ
in ``eta``, ``alpha``, ``clip`` and ``noise_std`` -- against the same data,
client selection and standard-normal server noise.  Per-replica arithmetic is
identical to a batch of one, so a replica's trajectory does not depend on
what else is in the batch.

Information flow: clients hold their ``theta_i`` and data and return only
clipped global gradients; :class:`Server` receives those plus the selected
client ids and draws its own noise.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergedError, RunError
from .model import AlphaGeometry, ModelState, clip_rows, l2_norm
from .rng import GaussianSource, substream

# Upper bound on elements in the per-chunk (replicas, clients, m, d) temporaries.
_TEMP_ELEMS = 1 << 21


@dataclass(frozen=True)
class AllClients:
    def rate(self, num_users: int) -> float:
        return 1.0

    def select(self, seed, t, num_users):
        return np.arange(num_users)


@dataclass(frozen=True)
class Bernoulli:
    q: float

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"sampling probability must lie in (0, 1], got {self.q}")

    def rate(self, num_users: int) -> float:
        return float(self.q)

    def select(self, seed, t, num_users):
        u = substream(seed, "select", t).random(num_users)
        return np.flatnonzero(u < self.q)


@dataclass(frozen=True)
class FixedQ:
    """``Q`` clients uniformly without replacement; accounted as rate ``Q/N``."""

    Q: int

    def __post_init__(self):
        if self.Q < 1:
            raise ConfigError(f"Q must be positive, got {self.Q}")

    def rate(self, num_users: int) -> float:
        if self.Q > num_users:
            raise ConfigError(f"Q={self.Q} exceeds the number of users {num_users}")
        return self.Q / num_users

    def select(self, seed, t, num_users):
        if self.Q > num_users:
            raise ConfigError(f"Q={self.Q} exceeds the number of users {num_users}")
        keys = substream(seed, "select", t).random(num_users)
        return np.sort(np.argsort(keys, kind="stable")[: self.Q])


class Objective(enum.Enum):
    UNIFORM = "uniform"
    WEIGHTED = "weighted"


class Algorithm(enum.Enum):
    ALG1 = "alg1"
    ALG2 = "alg2"
    ALG3 = "alg3"


@dataclass(frozen=True)
class HyperParams:
    eta: float
    geom: AlphaGeometry
    clip: float
    noise_std: float
    rounds: int
    sample_mode: object = AllClients()
    minibatch_sizes: int | tuple = 1
    objective_mode: Objective = Objective.UNIFORM

    def __post_init__(self):
        if not isinstance(self.geom, AlphaGeometry):
            object.__setattr__(self, "geom", AlphaGeometry(self.geom))
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be finite and nonnegative, got {self.eta}")
        if not self.clip > 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if not self.noise_std >= 0:
            raise ConfigError(f"noise_std must be nonnegative, got {self.noise_std}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be positive, got {self.rounds}")

    def sizes(self, num_users: int) -> np.ndarray:
        m = self.minibatch_sizes
        sizes = np.full(num_users, m, dtype=np.int64) if np.isscalar(m) else np.asarray(m, dtype=np.int64)
        if sizes.shape != (num_users,):
            raise ConfigError(f"need {num_users} minibatch sizes, got {sizes.shape[0]}")
        if np.any(sizes < 1):
            raise ConfigError("minibatch sizes must be >= 1")
        return sizes


@dataclass(frozen=True)
class RoundRecord:
    round: int
    num_selected: int
    w_norm: float
    theta_norm: float
    metric: float = math.nan


@dataclass
class EnsembleResult:
    states: list
    rounds: np.ndarray  # recorded round indices
    num_selected: np.ndarray  # per recorded round
    w_norm: np.ndarray  # (E, R)
    theta_norm: np.ndarray  # (E, R)
    metric: np.ndarray  # (E, R)
    diverged_at: list = field(default_factory=list)

    def trace(self, replica: int) -> list[RoundRecord]:
        return [
            RoundRecord(
                int(t),
                int(self.num_selected[j]),
                float(self.w_norm[replica, j]),
                float(self.theta_norm[replica, j]),
                float(self.metric[replica, j]),
            )
            for j, t in enumerate(self.rounds)
        ]


def _tree_sum(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        n = a.shape[0]
        half = n // 2
        s = a[0 : 2 * half : 2] + a[1 : 2 * half : 2]
        if n % 2:
            s = np.concatenate([s, a[n - 1 :]])
        a = s
    return a[0].copy()


def aggregate_deterministic(grads, client_ids=None, axis: int = 0) -> np.ndarray:
    """Sum vectors in a fixed pairwise-tree order keyed by client index.

    ``grads`` may be a mapping ``{client_id: vector}``, a sequence of vectors
    (ordered by ``client_ids`` when given, else taken as already ordered), or
    an array whose ``axis`` indexes clients.
    """
    if isinstance(grads, dict):
        client_ids = list(grads)
        grads = [grads[c] for c in client_ids]
    arr = np.asarray(grads, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
        axis = 0
    if client_ids is not None:
        order = np.argsort(np.asarray(client_ids), kind="stable")
        arr = np.take(arr, order, axis=axis)
    return _tree_sum(arr, axis)


class Server:
    """Applies the noisy global update.

    Sees only the ids of participating clients and their clipped global
    gradients, shaped ``(replicas, clients, d)``.
    """

    def __init__(self, seed, dim, normalizer, global_lr, noise_std):
        self.seed = seed
        self.dim = dim
        self.normalizer = float(normalizer)
        self.global_lr = np.asarray(global_lr, dtype=np.float64)
        self.noise_std = np.asarray(noise_std, dtype=np.float64)
        self._moves = bool(np.any(self.global_lr != 0))
        self._noisy = bool(np.any((self.noise_std > 0) & (self.global_lr != 0)))

    def noise(self, t: int) -> np.ndarray:
        return GaussianSource(substream(self.seed, "noise", t)).normals(self.dim)

    def apply(self, t: int, w: np.ndarray, client_ids: np.ndarray, clipped: np.ndarray) -> np.ndarray:
        if not self._moves:
            return w
        total = aggregate_deterministic(clipped, axis=1)
        if self._noisy:
            zeta = self.noise_std[:, None] * self.noise(t)[None, :]
        else:
            zeta = 0.0
        return w - self.global_lr[:, None] * (total / self.normalizer + zeta)


class ClientPool:
    """Client-side work for one round: sample, compute, update theta, clip."""

    def __init__(self, streams, sizes, average, local_lr, clip, workers=1):
        self.streams = streams
        self.sizes = sizes
        self.average = average
        self.local_lr = np.asarray(local_lr, dtype=np.float64)
        self.clip = np.asarray(clip, dtype=np.float64)
        self.workers = max(1, int(workers))
        self._updates_local = bool(np.any(self.local_lr != 0))
        self.last_checksum = np.zeros(len(self.local_lr))

    def _grads(self, ids, w, thetas):
        """Per-replica minibatch gradients ``(E, len(ids), d)`` for clients ``ids``."""
        E, d = w.shape
        out = np.empty((E, len(ids), d))
        if len(ids) == 0:
            return out
        batches = [self.streams[i].draw(int(self.sizes[i])) for i in ids]
        ms = self.sizes[ids]
        for m in np.unique(ms):
            pos = np.flatnonzero(ms == m)
            X = np.stack([batches[p][0] for p in pos])  # (k, m, d)
            y = np.stack([batches[p][1] for p in pos])  # (k, m)
            users = ids[pos]
            step = max(1, _TEMP_ELEMS // X.size)
            for e0 in range(0, E, step):
                e1 = min(E, e0 + step)
                u = w[e0:e1, None, :] + thetas[e0:e1][:, users, :]
                # stacked per-(replica, client) mat-vec products: each result
                # depends only on its own operands, never on the batch size
                r = np.matmul(X[None], u[..., None])[..., 0] - y[None]
                g = np.matmul(r[:, :, None, :], X[None])[:, :, 0, :]
                if self.average:
                    g = g / m
                out[e0:e1, pos, :] = g
        return out

    def run_round(self, w, thetas, selected):
        """Update ``thetas`` in place for ``selected``; return clipped global gradients."""
        if self.workers > 1 and len(selected) > 1:
            chunks = np.array_split(selected, min(self.workers, len(selected)))
            with ThreadPoolExecutor(self.workers) as ex:
                parts = list(ex.map(lambda c: self._grads(c, w, thetas), chunks))
            g = np.concatenate(parts, axis=1)
        else:
            g = self._grads(selected, w, thetas)
        self.last_checksum = np.sum(g, axis=(1, 2))
        if self._updates_local:
            sel = slice(None) if len(selected) == thetas.shape[1] else selected
            thetas[:, sel, :] -= self.local_lr[:, None, None] * g
        return clip_rows(g, self.clip[:, None])


def _normalizer(algorithm: Algorithm, rate: float, sizes: np.ndarray, num_users: int) -> float:
    if algorithm is Algorithm.ALG1:
        return float(num_users)
    if algorithm is Algorithm.ALG2:
        return rate * float(np.sum(sizes))
    return rate * float(num_users)


def _check_shared(replicas: Sequence[HyperParams]):
    first = replicas[0]
    for hp in replicas[1:]:
        if (
            hp.rounds != first.rounds
            or hp.sample_mode != first.sample_mode
            or np.any(np.atleast_1d(hp.minibatch_sizes) != np.atleast_1d(first.minibatch_sizes))
            or hp.objective_mode != first.objective_mode
        ):
            raise ConfigError("replicas must share rounds, sampling, minibatch sizes and objective")


def _check_algorithm(algorithm: Algorithm, hp: HyperParams, sizes: np.ndarray):
    if algorithm is Algorithm.ALG1:
        if not isinstance(hp.sample_mode, AllClients):
            raise ConfigError("alg1 requires all clients every round")
        if np.any(sizes != sizes[0]):
            raise ConfigError("alg1 requires equal minibatch sizes")
        if hp.objective_mode is not Objective.UNIFORM:
            raise ConfigError("alg1 optimizes the uniform objective")
    elif algorithm is Algorithm.ALG2:
        if hp.objective_mode is not Objective.WEIGHTED:
            raise ConfigError("alg2 optimizes the weighted objective")
    elif hp.objective_mode is not Objective.UNIFORM:
        raise ConfigError("alg3 optimizes the uniform objective")


def train(
    streams,
    replicas: Sequence[HyperParams],
    algorithm: Algorithm | str,
    seed: int,
    init: ModelState | None = None,
    metric: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    stride: int = 1,
    workers: int = 1,
    on_diverge: str = "raise",
    server_cls=Server,
) -> EnsembleResult:
    """Run ``len(replicas)`` training configurations side by side.

    ``metric(avg_w, avg_thetas)`` receives batched averaged iterates of shapes
    ``(E, d)`` and ``(E, N, d)`` and returns ``(E,)`` values; it is evaluated
    every ``stride`` rounds and at the last round.  ``on_diverge="mark"``
    records the first non-finite round per replica instead of raising.
    """
    algorithm = Algorithm(algorithm)
    if not streams:
        raise RunError("no client data streams")
    if not replicas:
        raise ConfigError("no replicas to train")
    if stride < 1:
        raise ConfigError("stride must be positive")
    replicas = list(replicas)
    _check_shared(replicas)
    num_users = len(streams)
    dim = streams[0].dim
    if any(s.dim != dim for s in streams):
        raise ConfigError("all streams must share the feature dimension")
    first = replicas[0]
    sizes = first.sizes(num_users)
    _check_algorithm(algorithm, first, sizes)
    mode = first.sample_mode
    rate = mode.rate(num_users)
    normalizer = _normalizer(algorithm, rate, sizes, num_users)

    eta = np.array([hp.eta for hp in replicas])
    alpha = np.array([hp.geom.alpha for hp in replicas])
    is_global = np.isinf(alpha)
    local_lr = np.where(is_global, 0.0, eta / normalizer)
    global_lr = np.where(is_global, eta, np.where(alpha == 0, 0.0, alpha * eta))
    clip = np.array([hp.clip for hp in replicas])
    noise_std = np.array([hp.noise_std for hp in replicas])

    E = len(replicas)
    init = init if init is not None else ModelState.zeros(num_users, dim)
    if init.w.shape != (dim,) or init.thetas.shape != (num_users, dim):
        raise ConfigError("initial state does not match the data dimensions")
    w = np.repeat(init.w[None], E, axis=0)
    thetas = np.repeat(init.thetas[None], E, axis=0)
    sum_w = np.repeat(init.sum_w[None], E, axis=0)
    sum_thetas = np.repeat(init.sum_thetas[None], E, axis=0)
    start = init.round

    clients = ClientPool(streams, sizes, algorithm is not Algorithm.ALG2, local_lr, clip, workers)
    server = server_cls(seed, dim, normalizer, global_lr, noise_std)

    rec_rounds, rec_sel, rec_wn, rec_tn, rec_metric = [], [], [], [], []
    diverged_at = [None] * E
    alive = np.ones(E, dtype=bool)
    last = start + first.rounds
    with np.errstate(all="ignore"):
        for t in range(start + 1, last + 1):
            selected = mode.select(seed, t, num_users)
            sum_w += w
            sum_thetas += thetas
            clipped = clients.run_round(w, thetas, selected)
            w = server.apply(t, w, selected, clipped)

            # a non-finite theta update shows up in its (pre-clip) gradient sum
            finite = np.isfinite(np.sum(w, axis=1)) & np.isfinite(clients.last_checksum)
            newly = alive & ~finite
            if np.any(newly):
                if on_diverge == "raise":
                    raise DivergedError(t)
                for e in np.flatnonzero(newly):
                    diverged_at[e] = t
                alive &= finite

            if t % stride == 0 or t == last:
                n = t
                rec_rounds.append(t)
                rec_sel.append(len(selected))
                rec_wn.append(l2_norm(w))
                rec_tn.append(np.sqrt(np.sum(thetas * thetas, axis=(1, 2))))
                if metric is not None:
                    rec_metric.append(np.asarray(metric(sum_w / n, sum_thetas / n), dtype=np.float64))
                else:
                    rec_metric.append(np.full(E, math.nan))

    states = [
        ModelState(w[e].copy(), thetas[e].copy(), last, sum_w[e].copy(), sum_thetas[e].copy())
        for e in range(E)
    ]
    return EnsembleResult(
        states,
        np.asarray(rec_rounds, dtype=np.int64),
        np.asarray(rec_sel, dtype=np.int64),
        np.stack(rec_wn, axis=1),
        np.stack(rec_tn, axis=1),
        np.stack(rec_metric, axis=1),
        diverged_at,
    )


def _single(streams, hp, init, algorithm, seed, metric, stride, workers, server_cls):
    single_metric = None
    if metric is not None:
        def single_metric(avg_w, avg_thetas):
            return np.array([metric(ModelState(avg_w[0], avg_thetas[0]))])
    res = train(
        streams, [hp], algorithm, seed, init=init, metric=single_metric,
        stride=stride, workers=workers, server_cls=server_cls,
    )
    return res.states[0], res.trace(0)


def ppsgd_run(streams, hp: HyperParams, init=None, seed=0, metric=None, stride=1, workers=1, server_cls=Server):
    """All-clients variant (alg1): all clients each round, averaged minibatch gradients.

    ``metric``, if given, maps a :class:`ModelState` holding the averaged
    iterate to a float recorded in the trace.
    """
    return _single(streams, hp, init, Algorithm.ALG1, seed, metric, stride, workers, server_cls)


def ppsgd_sampled_run(streams, hp: HyperParams, init=None, seed=0, metric=None, stride=1, workers=1, server_cls=Server):
    """Sampled variant (alg2): client sampling, summed minibatch gradients, weighted objective."""
    return _single(streams, hp, init, Algorithm.ALG2, seed, metric, stride, workers, server_cls)


def ppsgd_sampled_avg_run(streams, hp: HyperParams, init=None, seed=0, metric=None, stride=1, workers=1, server_cls=Server):
    """Sampled-average variant (alg3): client sampling, averaged minibatch gradients, uniform objective."""
    return _single(streams, hp, init, Algorithm.ALG3, seed, metric, stride, workers, server_cls)
