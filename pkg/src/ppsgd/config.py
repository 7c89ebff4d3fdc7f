"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and ``#`` comments are ignored.  List values are comma
separated; ``inf`` denotes infinity.  Unknown keys are errors.

Keys (defaults in brackets):

dataset          synthetic | csv                                  [synthetic]
N, d             synthetic users and dimension                    [1000, 100]
shared_coords    coordinates shared by all user optima            [95]
theta0_std       std of the shared base parameter                 [10]
delta_std        std of per-user deviations                       [0.01]
tau              label noise std                                  [1]
data_seed        seed of the synthetic ground truth               [0]
csv_train        glob of per-user training CSVs (dataset = csv)
csv_test         glob of per-user held-out CSVs (optional)
epochs           passes over CSV data; 0 = single pass            [0]
algorithm        alg1 | alg2 | alg3                               [alg1]
eta              step sizes                                       [synthetic grid]
alpha_q          personalization levels alpha * Q                 [synthetic grid]
sigma            noise multipliers                                [synthetic grid]
clip             clipping thresholds                              [10]
Q                clients per round, without replacement           [all]
q                Bernoulli client sampling probability (alg2/alg3 only; excludes Q)
m                minibatch size per client                        [10]
rounds           training rounds (ignored when epochs > 0)        [1000]
delta            privacy delta                                    [1e-4]
seeds            run seeds                                        [0]
stride           record every stride rounds                       [10]
threads          worker processes for the sweep                   [1]
output_dir       where CSV outputs go                             [out]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .data import SyntheticConfig
from .errors import ConfigError

SYNTHETIC_ETA = (0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0, 1.2, 1.5, 1.8)
SYNTHETIC_ALPHA_Q = (0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, math.inf)
SYNTHETIC_SIGMA = (0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    csv_train: str | None = None
    csv_test: str | None = None
    epochs: int = 0
    algorithm: str = "alg1"
    eta: tuple = SYNTHETIC_ETA
    alpha_q: tuple = SYNTHETIC_ALPHA_Q
    sigma: tuple = SYNTHETIC_SIGMA
    clip: tuple = (10.0,)
    Q: int | None = None
    q: float | None = None
    m: int = 10
    rounds: int = 1000
    delta: float = 1e-4
    seeds: tuple = (0,)
    stride: int = 10
    threads: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError(f"dataset must be synthetic or csv, got {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_train:
            raise ConfigError("dataset = csv requires csv_train")
        if self.algorithm not in ("alg1", "alg2", "alg3"):
            raise ConfigError(f"algorithm must be alg1, alg2 or alg3, got {self.algorithm!r}")
        for name in ("eta", "alpha_q", "sigma", "clip", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} grid is empty")
        if any(a < 0 for a in self.alpha_q):
            raise ConfigError("alpha_q values must be >= 0")
        if any(s < 0 for s in self.sigma):
            raise ConfigError("sigma values must be >= 0")
        if any(not c > 0 for c in self.clip):
            raise ConfigError("clip values must be positive")
        if any(not (e >= 0 and math.isfinite(e)) for e in self.eta):
            raise ConfigError("eta values must be finite and >= 0")
        if self.Q is not None and self.q is not None:
            raise ConfigError("set at most one of Q and q")
        if self.algorithm == "alg1" and self.q is not None:
            raise ConfigError("alg1 uses all clients; q applies to alg2/alg3")
        if self.q is not None and not 0 < self.q <= 1:
            raise ConfigError("q must lie in (0, 1]")
        if self.Q is not None and self.Q < 1:
            raise ConfigError("Q must be positive")
        if self.m < 1 or self.rounds < 1 or self.stride < 1 or self.threads < 1 or self.epochs < 0:
            raise ConfigError("m, rounds, stride and threads must be positive; epochs >= 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")


_SYNTH_KEYS = {
    "N": int, "d": int, "shared_coords": int, "theta0_std": float,
    "delta_std": float, "tau": float, "data_seed": int,
}
_SCALAR_KEYS = {
    "dataset": str, "csv_train": str, "csv_test": str, "epochs": int,
    "algorithm": str, "Q": int, "q": float, "m": int, "rounds": int,
    "delta": float, "stride": int, "threads": int, "output_dir": str,
}
_LIST_KEYS = {"eta": float, "alpha_q": float, "sigma": float, "clip": float, "seeds": int}


def _convert(kind, raw, key, lineno):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> ExperimentConfig:
    synth = {}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values or key in synth:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        if key in _SYNTH_KEYS:
            synth[key] = _convert(_SYNTH_KEYS[key], raw, key, lineno)
        elif key in _SCALAR_KEYS:
            values[key] = _convert(_SCALAR_KEYS[key], raw, key, lineno)
        elif key in _LIST_KEYS:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            values[key] = tuple(_convert(_LIST_KEYS[key], s, key, lineno) for s in items)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if "data_seed" in synth:
        synth["seed"] = synth.pop("data_seed")
    return ExperimentConfig(synthetic=SyntheticConfig(**synth), **values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw) if kw else cfg
