"""Grid sweeps, learning-rate selection, privacy/utility curves and CSV output.

A sweep runs every ``(eta, alpha_q, sigma, clip)`` cell for every seed.  All
cells of one seed share data, client selection and noise draws, so they are
trained together as one replica batch (split into chunks across worker
processes when ``threads > 1``).  A cell's trajectory does not depend on the
chunking, which keeps output byte-identical across thread counts.

``sigma`` in the grid is the accountant's noise multiplier; the server noise
std is ``sigma * clip / normalizer``.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import generate_ground_truth, load_user_csv, synthetic_streams
from .errors import ConfigError, QueryError
from .model import AlphaGeometry, excess_risk_arrays
from .optimizer import (
    Algorithm, AllClients, Bernoulli, FixedQ, HyperParams, Objective, _normalizer, train,
)
from .privacy import epsilon_for, epsilon_trace, noise_std_from_sigma

HEADER = ("round", "metric", "epsilon", "alpha", "eta", "sigma", "clip", "seed", "flags")
CURVE_HEADER = ("curve", "epsilon", "sigma", "metric", "alpha", "eta")

LOCAL_EPS = -1.0  # fully private: the global model never moves

FLAG_DIVERGED = "diverged"
FLAG_POISSON = "poisson_approx"  # without-replacement sampling accounted as Poisson

# Replicas trained together in one engine call.
_MAX_BATCH = 256


@dataclass(frozen=True)
class RunRecord:
    round: int
    metric: float
    epsilon: float
    alpha: float
    eta: float
    sigma: float
    clip: float
    seed: int
    flags: tuple = ()

    @property
    def diverged(self) -> bool:
        return FLAG_DIVERGED in self.flags

    @property
    def poisson_approx(self) -> bool:
        return FLAG_POISSON in self.flags


@dataclass(frozen=True)
class Cell:
    eta: float
    alpha_q: float
    sigma: float
    clip: float


@dataclass(frozen=True)
class SweepPlan:
    """Derived run settings shared by all cells of a configuration."""

    algorithm: Algorithm
    sample_mode: object
    num_users: int
    rounds: int
    rate: float
    normalizer: float
    expected_clients: float
    metric_name: str

    def alpha(self, alpha_q: float) -> float:
        return alpha_q / self.expected_clients

    def flags(self) -> tuple:
        if isinstance(self.sample_mode, FixedQ) and self.sample_mode.Q < self.num_users:
            return (FLAG_POISSON,)
        return ()


def grid_cells(cfg: ExperimentConfig) -> list[Cell]:
    return [
        Cell(float(e), float(a), float(s), float(c))
        for c in cfg.clip for a in cfg.alpha_q for s in cfg.sigma for e in cfg.eta
    ]


def _streams(cfg: ExperimentConfig, seed: int):
    if cfg.dataset == "synthetic":
        truth = generate_ground_truth(cfg.synthetic)
        return synthetic_streams(truth, seed), truth
    return load_user_csv(cfg.csv_train, multi_epoch=cfg.epochs > 0, seed=seed), None


def _sample_mode(cfg: ExperimentConfig, num_users: int):
    if cfg.algorithm == "alg1":
        if cfg.Q is not None and cfg.Q != num_users:
            raise ConfigError("alg1 uses all clients; Q must be omitted or equal N")
        return AllClients()
    if cfg.q is not None:
        return Bernoulli(cfg.q)
    Q = cfg.Q if cfg.Q is not None else num_users
    if Q > num_users:
        raise ConfigError(f"Q={Q} exceeds the number of users {num_users}")
    return FixedQ(Q)


def plan_sweep(cfg: ExperimentConfig, streams=None) -> SweepPlan:
    if streams is None:
        streams, _ = _streams(cfg, cfg.seeds[0])
    N = len(streams)
    algorithm = Algorithm(cfg.algorithm)
    mode = _sample_mode(cfg, N)
    rate = mode.rate(N)
    sizes = np.full(N, cfg.m, dtype=np.int64)
    normalizer = _normalizer(algorithm, rate, sizes, N)
    if cfg.epochs > 0:
        per_user = min(len(s) for s in streams) // cfg.m
        if per_user < 1:
            raise ConfigError(f"minibatch m={cfg.m} exceeds the smallest user dataset")
        # a user takes part in a fraction ``rate`` of rounds
        rounds = max(1, int(round(cfg.epochs * per_user / rate)))
    else:
        rounds = cfg.rounds
    if cfg.dataset == "synthetic":
        metric_name = "excess_risk"
    else:
        metric_name = "test_mse" if cfg.csv_test else "train_mse"
    return SweepPlan(algorithm, mode, N, rounds, rate, normalizer, rate * N, metric_name)


def _mse_metric(streams):
    data = [(s.X, s.y) for s in streams]

    def metric(avg_w, avg_thetas):
        total = np.zeros(avg_w.shape[0])
        for i, (X, y) in enumerate(data):
            u = avg_w + avg_thetas[:, i, :]
            r = np.sum(X[None] * u[:, None, :], axis=-1) - y[None]
            total = total + np.mean(r * r, axis=-1)
        return total / len(data)

    return metric


def _metric_fn(cfg: ExperimentConfig, streams, truth):
    if truth is not None:
        return lambda w, th: excess_risk_arrays(w, th, truth)
    if cfg.csv_test:
        test = load_user_csv(cfg.csv_test)
        if len(test) != len(streams):
            raise ConfigError(f"{len(test)} test users but {len(streams)} training users")
        return _mse_metric(test)
    return _mse_metric(streams)


def _run_chunk(cfg: ExperimentConfig, seed: int, cells: list[Cell]):
    """Train ``cells`` for one seed; return ``(rounds, metric (E, R), diverged_at)``."""
    streams, truth = _streams(cfg, seed)
    plan = plan_sweep(cfg, streams)
    objective = Objective.WEIGHTED if plan.algorithm is Algorithm.ALG2 else Objective.UNIFORM
    replicas = [
        HyperParams(
            eta=c.eta,
            geom=AlphaGeometry(plan.alpha(c.alpha_q)),
            clip=c.clip,
            noise_std=noise_std_from_sigma(c.sigma, c.clip, plan.normalizer),
            rounds=plan.rounds,
            sample_mode=plan.sample_mode,
            minibatch_sizes=cfg.m,
            objective_mode=objective,
        )
        for c in cells
    ]
    res = train(
        streams, replicas, plan.algorithm, seed,
        metric=_metric_fn(cfg, streams, truth), stride=cfg.stride, on_diverge="mark",
    )
    return res.rounds, res.metric, res.diverged_at


def _chunks(cells, parts):
    size = max(1, min(_MAX_BATCH, math.ceil(len(cells) / parts)))
    return [list(range(i, min(len(cells), i + size))) for i in range(0, len(cells), size)]


def run_sweep(cfg: ExperimentConfig, threads: int | None = None) -> list[RunRecord]:
    """Every grid cell for every seed, as one flat table.

    Rows are ordered by seed, then clip, alpha, sigma and eta (grid order),
    then round.
    """
    threads = cfg.threads if threads is None else threads
    cells = grid_cells(cfg)
    plan = plan_sweep(cfg)
    base_flags = plan.flags()

    jobs = [(seed, idx) for seed in cfg.seeds for idx in _chunks(cells, threads)]
    args = [(cfg, seed, [cells[i] for i in idx]) for seed, idx in jobs]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_chunk, *zip(*args)))
    else:
        results = [_run_chunk(*a) for a in args]

    eps_cache = {}
    table = []
    for (seed, idx), (rounds, metric, diverged_at) in zip(jobs, results):
        for k, i in enumerate(idx):
            c = cells[i]
            alpha = plan.alpha(c.alpha_q)
            if alpha == 0:
                eps = np.full(len(rounds), LOCAL_EPS)
            else:
                if c.sigma not in eps_cache:
                    eps_cache[c.sigma] = epsilon_trace(c.sigma, plan.rate, rounds, cfg.delta)
                eps = eps_cache[c.sigma]
            div = diverged_at[k]
            for j, t in enumerate(rounds):
                flags = base_flags
                m = float(metric[k, j])
                if div is not None and t >= div:
                    flags = flags + (FLAG_DIVERGED,)
                    m = math.inf
                table.append(RunRecord(
                    int(t), m, float(eps[j]), alpha, c.eta, c.sigma, c.clip, int(seed), flags,
                ))
    return table


def _worst_if_nan(v: float, maximize: bool) -> float:
    if math.isnan(v):
        return -math.inf if maximize else math.inf
    return v


@dataclass(frozen=True)
class BestCell:
    alpha: float
    sigma: float
    clip: float
    eta: float
    metric: float
    epsilon: float


def select_best_lr(table, at_round: int, maximize: bool = False) -> list[BestCell]:
    """Best ``eta`` per ``(alpha, sigma, clip)`` by mean metric over seeds at ``at_round``.

    Ties go to the smaller ``eta``.  With ``maximize`` the largest mean wins
    (for accuracy-like metrics).
    """
    rows = [r for r in table if r.round == at_round]
    if not rows:
        raise QueryError(f"table holds no rows for round {at_round}")
    groups = {}
    for r in rows:
        groups.setdefault((r.alpha, r.sigma, r.clip), {}).setdefault(r.eta, []).append(r)
    out = []
    for key in sorted(groups):
        best = None
        for eta in sorted(groups[key]):
            rs = sorted(groups[key][eta], key=lambda r: r.seed)
            mean = _worst_if_nan(float(np.mean([r.metric for r in rs])), maximize)
            if best is None or (mean > best[1] if maximize else mean < best[1]):
                best = (eta, mean, rs[0].epsilon)
        alpha, sigma, clip = key
        out.append(BestCell(alpha, sigma, clip, best[0], best[1], best[2]))
    return out


@dataclass(frozen=True)
class CurvePoint:
    curve: str
    epsilon: float
    sigma: float
    metric: float
    alpha: float
    eta: float


def _pick_intermediate(alphas):
    finite = [a for a in alphas if 0 < a < math.inf]
    if not finite:
        return None
    return finite[len(finite) // 2]


def tradeoff_curve(table, delta: float, sampling_rate: float = 1.0, intermediate_alpha=None,
                   clip=None, maximize: bool = False) -> list[CurvePoint]:
    """Privacy/utility curves at the end of training.

    For each ``sigma``, epsilon comes from the accountant at the final round
    and each alpha uses its best ``eta``.  Emits fixed-alpha curves ``local``
    (alpha 0), ``global`` (alpha inf) and ``intermediate`` when those alphas
    are in the table, plus ``envelope``, the best alpha at each sigma.  Rows
    are sorted by epsilon.
    """
    if not table:
        return []
    T = max(r.round for r in table)
    clips = sorted({r.clip for r in table})
    if clip is None:
        if len(clips) > 1:
            raise QueryError(f"table holds several clip values {clips}; pass clip=")
        clip = clips[0]
    best = [b for b in select_best_lr(table, T, maximize) if b.clip == clip]
    if not best:
        raise QueryError(f"no rows with clip {clip}")
    alphas = sorted({b.alpha for b in best})
    if intermediate_alpha is None:
        intermediate_alpha = _pick_intermediate(alphas)
    eps = {s: epsilon_for(s, sampling_rate, T, delta) for s in sorted({b.sigma for b in best})}
    named = [("local", 0.0), ("global", math.inf), ("intermediate", intermediate_alpha)]
    points = []
    for sigma in sorted(eps):
        at = {b.alpha: b for b in best if b.sigma == sigma}
        for name, a in named:
            if a is not None and a in at:
                points.append(CurvePoint(name, eps[sigma], sigma, at[a].metric, a, at[a].eta))
        ordered = [at[a] for a in sorted(at)]
        b = ordered[0]
        for cand in ordered[1:]:
            if (cand.metric > b.metric) if maximize else (cand.metric < b.metric):
                b = cand
        points.append(CurvePoint("envelope", eps[sigma], sigma, b.metric, b.alpha, b.eta))
    order = {"local": 0, "global": 1, "intermediate": 2, "envelope": 3}
    points.sort(key=lambda p: (p.epsilon, order[p.curve], p.sigma))
    return points


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def _fmt_eps(v: float) -> str:
    return "local" if v == LOCAL_EPS else _fmt(v)


def _parse_float(s: str) -> float:
    return float(s)


def emit_csv(table, path, meta: dict | None = None):
    """Write the record table; ``meta`` goes to a leading ``#`` comment line."""
    path = os.fspath(path)
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if meta:
                fh.write("# " + "; ".join(f"{k}: {v}" for k, v in meta.items()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for r in table:
                w.writerow([
                    str(r.round), _fmt(r.metric), _fmt_eps(r.epsilon), _fmt(r.alpha),
                    _fmt(r.eta), _fmt(r.sigma), _fmt(r.clip), str(r.seed), ";".join(r.flags),
                ])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_meta(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    out = {}
    for part in first[1:].strip().split(";"):
        if ":" in part:
            k, v = part.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def read_csv(path) -> list[RunRecord]:
    path = os.fspath(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(header) != HEADER:
        raise ConfigError(f"{path}: header must be {','.join(HEADER)}")
    out = []
    for k, row in enumerate(reader, start=2):
        if len(row) != len(HEADER):
            raise ConfigError(f"{path}: row {k} has {len(row)} fields")
        eps = LOCAL_EPS if row[2] == "local" else _parse_float(row[2])
        out.append(RunRecord(
            int(row[0]), _parse_float(row[1]), eps, _parse_float(row[3]), _parse_float(row[4]),
            _parse_float(row[5]), _parse_float(row[6]), int(row[7]),
            tuple(f for f in row[8].split(";") if f),
        ))
    return out


def emit_curve_csv(points, path):
    path = os.fspath(path)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            for p in points:
                w.writerow([p.curve, _fmt(p.epsilon), _fmt(p.sigma), _fmt(p.metric), _fmt(p.alpha), _fmt(p.eta)])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_curve_csv(path) -> list[CurvePoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CURVE_HEADER:
            raise ConfigError(f"{path}: header must be {','.join(CURVE_HEADER)}")
        return [
            CurvePoint(row[0], *(float(v) for v in row[1:]))
            for row in reader
        ]


def sweep_meta(cfg: ExperimentConfig, plan: SweepPlan) -> dict:
    return {
        "metric": plan.metric_name,
        "algorithm": cfg.algorithm,
        "sampling_rate": _fmt(plan.rate),
        "delta": _fmt(cfg.delta),
        "rounds": plan.rounds,
    }
