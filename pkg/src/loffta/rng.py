"""Deterministic, derivable random streams.

Every source of randomness in the package flows through :class:`RngStream`,
a thin wrapper over numpy's counter-based Philox generator seeded through
``SeedSequence``. Streams are identified by a 64-bit root seed plus a tuple
of integer derivation keys, so the same (seed, keys) always reproduces the
same draw sequence regardless of platform, process, or thread.
"""

from __future__ import annotations

import numpy as np

_MASK32 = 0xFFFFFFFF


def _spawn_key(keys: tuple[int, ...]) -> tuple[int, ...]:
    # SeedSequence spawn keys are uint32 words; split 64-bit keys into two.
    words: list[int] = []
    for k in keys:
        k = int(k)
        if k < 0:
            k &= (1 << 64) - 1
        words.append(k & _MASK32)
        words.append((k >> 32) & _MASK32)
    return tuple(words)


class RngStream:
    """A seeded Philox stream with hierarchical derivation.

    ``derive(*keys)`` returns an independent stream keyed by the parent's
    seed and derivation path; it never consumes draws from the parent.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        ss = np.random.SeedSequence(entropy=self.seed & ((1 << 64) - 1),
                                    spawn_key=_spawn_key(self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(k) for k in keys))

    # -- draw primitives -------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high] inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.uniform() < p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"
