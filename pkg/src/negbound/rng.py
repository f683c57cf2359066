"""Counter-based random streams keyed by (seed, purpose, index).

Every random quantity in the package is drawn from a stream identified by the
global seed, a purpose tag and an integer index, so any shard or batch can be
regenerated in isolation and results do not depend on evaluation order.
"""

from __future__ import annotations

import os
import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent Philox generator for ``(seed, tag, index)``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    ss = np.random.SeedSequence([int(seed), tag_id(tag), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def default_threads() -> int:
    env = os.environ.get("NEGBOUND_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"NEGBOUND_THREADS must be an integer, got {env!r}") from None
        if n >= 1:
            return n
    return max(1, os.cpu_count() or 1)
