"""Named, splittable random streams.

Every random decision in the simulator draws from a stream keyed by
``(master_seed, purpose, *indices)``.  Streams are built on numpy's Philox
counter-based bit generator, seeded through ``SeedSequence`` with the key
folded into the spawn key, so two streams with different keys never share
state and the draw order inside one stream does not depend on any other.
"""

from __future__ import annotations

import zlib

import numpy as np

RNG_ALGORITHM = "philox4x64-seedsequence-v1"

_MASK64 = (1 << 64) - 1


def purpose_id(purpose: str) -> int:
    """Stable 32-bit identifier for a stream purpose name."""
    return zlib.crc32(purpose.encode("utf-8"))


def stream(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    if master_seed < 0:
        raise ValueError(f"seed must be non-negative, got {master_seed}")
    key = (purpose_id(purpose),) + tuple(int(i) for i in indices)
    if any(k < 0 for k in key):
        raise ValueError(f"stream indices must be non-negative, got {indices}")
    seq = np.random.SeedSequence(entropy=master_seed & _MASK64, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
