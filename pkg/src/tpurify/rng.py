"""Deterministic, splittable random number generation.

All randomness in the package flows through Philox4x64-10 counter-based
generators keyed by a user seed plus integer/string tag words, so every
stream (weight init, shuffling, augmentation, attack starts) is
independent, platform-stable and reproducible from the one seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(w) -> int:
    if isinstance(w, (int, np.integer)):
        return int(w) & 0xFFFFFFFFFFFFFFFF
    if isinstance(w, str):
        return zlib.crc32(w.encode("utf-8"))
    raise TypeError(f"rng tag words must be int or str, got {type(w).__name__}")


def derive(seed: int, *words) -> np.random.Generator:
    """Child generator for stream (seed, *words); same inputs, same stream."""
    entropy = [_word(seed)] + [_word(w) for w in words]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
