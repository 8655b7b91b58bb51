"""Portable seeded randomness.

Every random decision in fedsim (synthetic data, partitions, weight init,
mini-batch order, client sampling) is drawn from :class:`PortableRNG`, a thin
layer over numpy's Philox4x64-10 counter-based generator seeded through
``numpy.random.SeedSequence``. Only the raw 64-bit output stream is used; the
conversions to uniforms, normals, gammas and permutations are defined here so
results do not depend on numpy's distribution code or the host platform.

Conversions (pinned):

* uniform in (0, 1): ``((raw >> 12) + 0.5) * 2**-52``
* normal: Box-Muller, cosine branch only, ``sqrt(-2 ln u1) * cos(2 pi u2)``
* gamma(shape): Marsaglia-Tsang; for shape < 1 draw gamma(shape + 1) then a
  uniform ``u`` and return ``g * u ** (1 / shape)``
* bounded integer in [0, n): ``(raw * n) >> 64``
* shuffle: Fisher-Yates from the last position down to 1
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

_TWO_M52 = 2.0**-52


def derive_seed(*parts: int) -> np.random.SeedSequence:
    """Seed sequence for a tuple of non-negative integers (e.g. seed, round)."""
    return np.random.SeedSequence([int(p) for p in parts])


class PortableRNG:
    def __init__(self, *seed_parts: int):
        if not seed_parts:
            seed_parts = (0,)
        self._bits = np.random.Philox(derive_seed(*seed_parts))

    def raw(self, n: int | None = None):
        if n is None:
            return int(self._bits.random_raw())
        return self._bits.random_raw(n)

    def uniform(self) -> float:
        return ((self.raw() >> 12) + 0.5) * _TWO_M52

    def uniforms(self, n: int) -> np.ndarray:
        raw = self.raw(n)
        return ((raw >> np.uint64(12)).astype(np.float64) + 0.5) * _TWO_M52

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> np.ndarray:
        # consumes the stream in the same (u1, u2) pair order as normal()
        u = self.uniforms(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def gamma(self, shape: float) -> float:
        if shape <= 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            g = self.gamma(shape + 1.0)
            u = self.uniform()
            return g * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.uniform()
            if u < 1.0 - 0.0331 * x**4:
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def dirichlet(self, alpha: float, k: int) -> list[float]:
        draws = [self.gamma(alpha) for _ in range(k)]
        total = math.fsum(draws)
        return [g / total for g in draws]

    def below(self, n: int) -> int:
        """Integer uniformly in [0, n) by multiply-shift."""
        return (self.raw() * n) >> 64

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        raw = self.raw(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = (int(raw[step]) * (i + 1)) >> 64
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffled(self, items: Sequence) -> list:
        perm = self.permutation(len(items))
        return [items[i] for i in perm]


def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lower index. The result always sums to ``total``.
    """
    wsum = math.fsum(weights)
    if wsum <= 0:
        raise ValueError("weights must have a positive sum")
    quotas = [w / wsum * total for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts
