"""Named, seedable random streams.

Every random draw in the package comes from an `Rng` handed down from the
experiment config; there is no global generator. Streams are labelled and
derived by hashing (parent key, label), so "node:3/batches" is the same
sequence no matter which thread or order touches it. Gaussians are produced
by Box-Muller from the raw uniform stream.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np


class Rng:
    """Counter-based (Philox) random stream with hash-derived child streams."""

    def __init__(self, seed: int, label: str = "root"):
        self._material = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
        key = int.from_bytes(self._material[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.label = label

    def child(self, label: str) -> "Rng":
        """Independent stream derived from this one's identity and `label`."""
        rng = object.__new__(Rng)
        rng._material = hashlib.sha256(self._material + b"/" + label.encode("utf-8")).digest()
        key = int.from_bytes(rng._material[:16], "little")
        rng._gen = np.random.Generator(np.random.Philox(key=key))
        rng.label = f"{self.label}/{label}"
        return rng

    def uniform(self, *shape: int) -> np.ndarray:
        """Uniform draws in [0, 1), float64."""
        return self._gen.random(shape if shape else None)

    def normal(self, *shape: int) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]: keeps log() finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * math.pi * u2), r * np.sin(2.0 * math.pi * u2)])[:n]
        if not shape:
            return z[0]
        return z.reshape(shape)

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def subsample(self, n: int, k: int) -> np.ndarray:
        """Deterministic choice of min(n, k) distinct indices out of range(n)."""
        if k >= n:
            return np.arange(n)
        return np.sort(np.argsort(self.uniform(n), kind="stable")[:k])
