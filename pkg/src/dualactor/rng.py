"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream)`` and positioned at ``counter``, so results never depend on
the order in which unrelated components consume randomness.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str, counter: int = 0) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream_id(stream)], dtype=np.uint64)
    ctr = np.array([0, 0, counter & 0xFFFFFFFFFFFFFFFF, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))
