"""Deterministic seed derivation and shuffling.

Everything that needs randomness in this package derives it from a single
u64 seed so that reruns with the same configuration are bit-identical.
Two generators are used:

* splitmix64 -- a tiny, fully specified mixer used for deriving child
  seeds from (seed, tag...) and for epoch shuffles.  Its output does not
  depend on numpy, so the shuffle order is reproducible from the
  documented algorithm alone.
* numpy's PCG64 -- used for bulk numeric sampling (dataset synthesis,
  weight init), always constructed from a derived child seed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """splitmix64 stream: state += golden gamma, output = mix(state)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix(self.state)

    def next_below(self, bound: int) -> int:
        """Uniform-ish integer in [0, bound) via multiply-shift."""
        return (self.next_u64() * bound) >> 64


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, *tags: int | str) -> int:
    """Derive a child seed from a master seed and a sequence of tags.

    Tags are folded into the splitmix64 state one by one; strings are
    hashed with FNV-1a first.  Stable across runs and platforms.
    """
    state = seed & _MASK64
    for tag in tags:
        t = _fnv1a64(tag) if isinstance(tag, str) else (tag & _MASK64)
        state = _mix((state + _GAMMA + t) & _MASK64)
    return _mix((state + _GAMMA) & _MASK64)


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by splitmix64."""
    rng = SplitMix64(seed)
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = rng.next_below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def generator(seed: int, *tags: int | str) -> np.random.Generator:
    """numpy Generator (PCG64) seeded from derive_seed(seed, *tags)."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
