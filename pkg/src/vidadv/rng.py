"""Counter-based random streams keyed by (seed, stream label)."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(label: str | int) -> int:
    """Stable 64-bit id for a stream label (independent of PYTHONHASHSEED)."""
    if isinstance(label, int):
        return label & _MASK64
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """A Philox stream. Identical ``(seed, stream)`` pairs give identical draws.

    Child streams are derived from labels, so a subsystem asks for
    ``rng.child("attack")`` instead of sharing a global generator.
    """

    def __init__(self, seed: int, stream: str | int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = stream_id(stream)
        self.gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, label: str | int) -> "Rng":
        mixed = stream_id(f"{self.stream}/{label}")
        return Rng(self.seed, mixed)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream:#x})"

    # thin conveniences over the numpy generator
    def random(self, size=None, dtype=np.float64):
        return self.gen.random(size, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)
