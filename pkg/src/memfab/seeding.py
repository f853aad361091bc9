"""Counter-based seed derivation: one master seed fans out to every stage and sample."""

import zlib

import numpy as np


def derive_seed(master: int, *keys) -> int:
    """Deterministic 31-bit seed for (master, key path). Keys may be ints or strings."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)
