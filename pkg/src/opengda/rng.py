"""Named random sub-streams derived from one run seed."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stage ``name``; adding a stage never shifts another."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
