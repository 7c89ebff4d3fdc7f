"""Synthetic federated regression data, per-user sample streams, CSV ingestion."""

from __future__ import annotations

import csv
import glob
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestionError, StreamExhaustedError
from .model import GroundTruth, SamplePoint
from .rng import GaussianSource, substream

# Samples generated per refill of a synthetic stream.  The sample sequence
# does not depend on this value.
_BLOCK = 256


@dataclass(frozen=True)
class SyntheticConfig:
    """Heterogeneous linear-regression population.

    Each user's optimum equals a shared base vector on the first
    ``shared_coords`` coordinates and adds a small per-user deviation on the
    rest.  Features have diagonal covariance ``1/k`` (``k`` 1-based).
    """

    N: int = 1000
    d: int = 100
    shared_coords: int = 95
    theta0_std: float = 10.0
    delta_std: float = 0.01
    tau: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.N < 1 or self.d < 1:
            raise ConfigError("N and d must be positive")
        if not 0 <= self.shared_coords <= self.d:
            raise ConfigError("shared_coords must lie in [0, d]")
        if self.theta0_std < 0 or self.delta_std < 0 or self.tau < 0:
            raise ConfigError("standard deviations must be nonnegative")

    def spectrum(self) -> np.ndarray:
        return 1.0 / np.arange(1, self.d + 1, dtype=np.float64)


def generate_ground_truth(cfg: SyntheticConfig) -> GroundTruth:
    src = GaussianSource(substream(cfg.seed, "truth", 0))
    theta0 = cfg.theta0_std * src.normals(cfg.d)
    thetas = np.tile(theta0, (cfg.N, 1))
    n_priv = cfg.d - cfg.shared_coords
    if n_priv:
        deltas = cfg.delta_std * src.normals(cfg.N * n_priv).reshape(cfg.N, n_priv)
        thetas[:, cfg.shared_coords:] += deltas
    return GroundTruth(thetas, cfg.spectrum(), cfg.tau)


class SampleStream:
    """Source of samples ``(x, y)`` for one user."""

    user_id: int
    dim: int

    def draw(self, m: int):
        """Return the next ``m`` samples as ``(X, y)`` of shapes ``(m, d)``, ``(m,)``."""
        raise NotImplementedError

    def draw_sample(self) -> SamplePoint:
        X, y = self.draw(1)
        return SamplePoint(X[0], float(y[0]))


class SyntheticStream(SampleStream):
    """I.i.d. draws ``x ~ N(0, diag(sigma))``, ``y = theta* . x + N(0, tau^2)``.

    Standard normals come from the user's ``("data", user_id)`` substream, one
    row of ``d + 1`` normals per sample (features, then label noise).
    """

    def __init__(self, user_id: int, theta_star, sigma_diag, tau: float, seed: int):
        self.user_id = int(user_id)
        self.theta_star = np.asarray(theta_star, dtype=np.float64)
        self._scale = np.sqrt(np.asarray(sigma_diag, dtype=np.float64))
        self.tau = float(tau)
        self.dim = self.theta_star.shape[0]
        self._src = GaussianSource(substream(seed, "data", self.user_id))
        self._X = np.empty((0, self.dim))
        self._y = np.empty(0)
        self._pos = 0

    def _refill(self, need: int):
        nblock = max(_BLOCK, need)
        z = self._src.normals(nblock * (self.dim + 1)).reshape(nblock, self.dim + 1)
        X = z[:, : self.dim] * self._scale
        y = np.sum(X * self.theta_star, axis=1) + self.tau * z[:, self.dim]
        self._X = np.concatenate([self._X[self._pos:], X])
        self._y = np.concatenate([self._y[self._pos:], y])
        self._pos = 0

    def draw(self, m: int):
        if len(self._y) - self._pos < m:
            self._refill(m)
        sl = slice(self._pos, self._pos + m)
        self._pos += m
        return self._X[sl], self._y[sl]


class FiniteStream(SampleStream):
    """Replays a fixed per-user dataset.

    In one-pass mode samples come out in file order and running past the end
    raises :class:`StreamExhaustedError`.  In multi-epoch mode the data is
    reshuffled at the start of every epoch from the ``("epoch", user, e)``
    substream, and a minibatch may straddle an epoch boundary.
    """

    def __init__(self, user_id, X, y, multi_epoch: bool = False, seed: int = 0):
        self.user_id = int(user_id)
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ConfigError("X must be (n, d) and y (n,)")
        if len(self.y) == 0:
            raise ConfigError(f"user {user_id} has no samples")
        self.dim = self.X.shape[1]
        self.multi_epoch = multi_epoch
        self.seed = seed
        self.epoch = 0
        self._cursor = 0
        self._order = self._epoch_order(0)

    def __len__(self):
        return len(self.y)

    def _epoch_order(self, epoch):
        n = len(self.y)
        if not self.multi_epoch:
            return np.arange(n)
        keys = substream(self.seed, "epoch", self.user_id, epoch).random(n)
        return np.argsort(keys, kind="stable")

    def draw(self, m: int):
        idx = []
        while len(idx) < m:
            if self._cursor == len(self.y):
                if not self.multi_epoch:
                    raise StreamExhaustedError(
                        f"user {self.user_id}: one-pass stream exhausted after "
                        f"{len(self.y)} samples"
                    )
                self.epoch += 1
                self._cursor = 0
                self._order = self._epoch_order(self.epoch)
            take = min(m - len(idx), len(self.y) - self._cursor)
            idx.extend(self._order[self._cursor : self._cursor + take])
            self._cursor += take
        idx = np.asarray(idx, dtype=np.intp)
        return self.X[idx], self.y[idx]


def synthetic_streams(truth: GroundTruth, seed: int) -> list[SyntheticStream]:
    return [
        SyntheticStream(i, truth.theta_stars[i], truth.sigma_diag, truth.tau, seed)
        for i in range(truth.num_users)
    ]


def draw_sample(stream: SampleStream) -> SamplePoint:
    return stream.draw_sample()


def _read_user_file(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(path, 1, "empty file (missing header)") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        expected = ["y"] + [f"x{k}" for k in range(1, d + 1)]
        if d < 1 or header != expected:
            raise IngestionError(path, 1, f"header must be y,x1,...,xd; got {header}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 1:
                raise IngestionError(path, line, f"expected {d + 1} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise IngestionError(path, line, f"non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError(path, line, "non-finite value")
            rows.append(vals)
    if not rows:
        raise IngestionError(path, 2, "no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return arr[:, 1:], arr[:, 0]


def load_user_csv(path_pattern: str, multi_epoch: bool = False, seed: int = 0):
    """One :class:`FiniteStream` per file matching ``path_pattern``.

    User ids follow sorted filename order.  Every file must share the feature
    dimension of the first one.
    """
    paths = sorted(glob.glob(path_pattern))
    if not paths:
        raise ConfigError(f"no files match {path_pattern!r}")
    streams = []
    dim = None
    for uid, path in enumerate(paths):
        X, y = _read_user_file(path)
        if dim is None:
            dim = X.shape[1]
        elif X.shape[1] != dim:
            raise IngestionError(
                path, 1, f"feature dimension {X.shape[1]} differs from {dim} in {paths[0]}"
            )
        streams.append(FiniteStream(uid, X, y, multi_epoch=multi_epoch, seed=seed))
    return streams


def write_user_csv(path, X, y):
    """Write one user's samples with 17 significant digits (exact round trip)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y"] + [f"x{k}" for k in range(1, X.shape[1] + 1)])
        for xi, yi in zip(X, y):
            writer.writerow([f"{yi:.17g}"] + [f"{v:.17g}" for v in xi])
