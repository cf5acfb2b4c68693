"""Seeded, splittable random streams.

Backed by numpy's counter-based Philox bit generator; :meth:`Rng.split`
spawns statistically independent child streams from the seed sequence so
data sampling, parameter init and diffusion noise never share state.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int = 2) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def child(self, name: str) -> "Rng":
        """Stream keyed by name; same parent seed and name give the same stream."""
        key = [int(b) for b in name.encode("utf-8")]
        entropy = self._seq.entropy
        return Rng(np.random.SeedSequence(entropy, spawn_key=tuple(self._seq.spawn_key) + tuple(key)))

    # thin conveniences over the generator
    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, x):
        return self.generator.permutation(x)


def sample_standard_normal(rng: Rng, shape, dtype=np.float64) -> np.ndarray:
    return rng.generator.standard_normal(size=shape).astype(dtype, copy=False)
