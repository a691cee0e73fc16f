"""Named random streams derived from one top-level seed."""
import zlib

import numpy as np


def stream(seed, name):
    """Generator for sub-stream ``name``; independent of which other streams exist."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
