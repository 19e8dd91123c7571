"""Keyed random streams.

Every stochastic component draws from its own Philox stream, keyed by a
run seed plus a structured key such as ("augment", epoch, batch, item,
view). Philox is counter-based, so streams with different keys are
independent and the draw order inside one component never perturbs
another. This is what makes batch-parallel augmentation and worker
pools deterministic regardless of scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream key parts must be int or str, got {type(part).__name__}")


def stream(seed: int, *key) -> np.random.Generator:
    """Return the generator for (seed, key).

    Same (seed, key) always yields the same stream; distinct keys yield
    statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
