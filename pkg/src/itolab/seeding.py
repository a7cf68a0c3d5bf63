"""Named, reproducible RNG sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(root_seed: int, *keys) -> np.random.Generator:
    """Generator for the sub-stream ``keys`` (ints or names) under ``root_seed``.

    The same (root_seed, keys) always yields the same stream, independent of
    how many other streams were created before it.
    """
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=tuple(_key(k) for k in keys)))


def derive_seed(root_seed: int, *keys) -> int:
    """Deterministic 63-bit integer seed for a named sub-stream."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))
