"""Named random sub-streams derived from one experiment seed."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name) gives the same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                                         zlib.crc32(name.encode())]))


def sub_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(0, 2**63 - 1))
