"""Named, independent random streams derived from one experiment seed."""
from __future__ import annotations

import zlib

import numpy as np


def _code(label):
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    return int(label)


def seed_sequence(seed, *labels):
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [_code(l) for l in labels])


def stream(seed, *labels):
    """Generator for the stream named by ``labels`` (strings or ints)."""
    return np.random.default_rng(seed_sequence(seed, *labels))


def derive_seed(seed, *labels):
    """A 63-bit integer seed for the stream named by ``labels``."""
    state = seed_sequence(seed, *labels).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF
