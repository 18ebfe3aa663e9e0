"""Seed derivation.

Every random stream in the package comes from a Philox (counter-based)
generator keyed by ``(seed, *path)``, where ``path`` is a short tuple of
ints or strings naming the consumer, e.g. ``(seed, "pgd", sample, restart)``.
Strings are hashed with CRC32 so that the mapping is stable across
processes and platforms.  One global seed therefore fixes every sub-stream,
and adding a consumer never perturbs the streams of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _words(path):
    for part in path:
        if isinstance(part, str):
            yield zlib.crc32(part.encode("utf-8"))
        else:
            value = int(part)
            if value < 0:
                raise ValueError("seed path components must be non-negative")
            # split 64-bit values into 32-bit words
            yield value & 0xFFFFFFFF
            yield value >> 32


def generator(seed: int, *path) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *path)``."""
    entropy = list(_words((seed,) + path))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for ``(seed, *path)``."""
    entropy = list(_words((seed,) + path))
    return int(np.random.SeedSequence(entropy).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
