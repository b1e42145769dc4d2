"""Keyed counter-based random streams.

Every random draw in a run comes from a Philox generator keyed by the run
seed plus a tuple of labels (individual id, purpose, attack kind, ...). The
value of a draw therefore depends only on its key, never on evaluation order
or worker count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for ``(seed, *keys)``."""
    return int(stream(seed, *keys).integers(0, 2**63 - 1))
