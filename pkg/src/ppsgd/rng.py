"""Seeded random substreams and a frozen Gaussian sampler.

Every random draw in a run comes from a substream identified by
``(master_seed, tag, *index)``:

* ``("data", i)``      per-user sample stream
* ``("select", t)``    client selection at round ``t``
* ``("noise", t)``     server noise at round ``t``
* ``("epoch", i, e)``  reshuffle of a finite stream at epoch ``e``
* ``("truth", 0)``     synthetic ground-truth parameters

Substreams are PCG64 generators seeded through ``numpy.random.SeedSequence``
with the tag mapped to a fixed integer code, so they are independent of
each other and of the order in which they are created.

Gaussian variates use the Box-Muller transform on consecutive pairs of
53-bit uniforms.  The output sequence of a :class:`GaussianSource` does not
depend on how requests are chunked.  Bit-exact reproduction holds for a fixed
numpy build; ``log``/``cos``/``sin`` come from numpy's vectorized math, which
may differ in the last ulp across CPU feature sets.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

TAG_CODES = {
    "data": 1,
    "select": 2,
    "noise": 3,
    "epoch": 4,
    "truth": 5,
}

_TWO_PI = 2.0 * np.pi


def substream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return the generator for substream ``(seed, tag, *index)``."""
    try:
        code = TAG_CODES[tag]
    except KeyError:
        raise ConfigError(f"unknown substream tag {tag!r}") from None
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(code, *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))


class GaussianSource:
    """Standard normal variates via Box-Muller over a uniform generator."""

    def __init__(self, gen: np.random.Generator):
        self._gen = gen
        self._spare = None

    @classmethod
    def from_substream(cls, seed, tag, *index):
        return cls(substream(seed, tag, *index))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        if n == 0:
            return out
        start = 0
        if self._spare is not None:
            out[0] = self._spare
            self._spare = None
            start = 1
        remaining = n - start
        if remaining == 0:
            return out
        pairs = (remaining + 1) // 2
        u = self._gen.random(2 * pairs)
        # 1 - U lies in (0, 1], keeping log finite.
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = _TWO_PI * u[1::2]
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        out[start:] = z[:remaining]
        if 2 * pairs > remaining:
            self._spare = float(z[-1])
        return out

    def uniforms(self, n: int) -> np.ndarray:
        """Uniforms on [0, 1) from the same underlying generator.

        Drawing uniforms discards any cached Box-Muller spare so that the
        stream position stays well defined.
        """
        self._spare = None
        return self._gen.random(n)
