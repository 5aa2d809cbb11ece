"""Counter-based random streams keyed by ``(seed, label)``.

Every consumer of randomness names its purpose (``"init"``, ``"mask"``,
``"queue-init"`` ...) so that adding draws to one stream never shifts the
values seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng"]

_MASK64 = (1 << 64) - 1


def _derive_key(seed: int, label: str) -> int:
    digest = hashlib.blake2b(
        f"{seed & _MASK64}:{label}".encode("utf-8"), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """A named Philox stream.

    ``Rng(seed, label)`` always yields the same sequence of draws on every
    platform; ``child`` derives an independent sub-stream (for example one
    per scene or per training step).
    """

    __slots__ = ("seed", "stream_label", "_gen")

    def __init__(self, seed: int, stream_label: str = "main"):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64
        self.stream_label = str(stream_label)
        self._gen = None

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_label={self.stream_label!r})"

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            key = _derive_key(self.seed, self.stream_label)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def child(self, *parts) -> "Rng":
        label = "/".join([self.stream_label, *(str(p) for p in parts)])
        return Rng(self.seed, label)

    # thin conveniences over the generator
    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size=size)
