"""Named random streams split off a single root seed.

Each consumer asks for its stream by name, so adding a consumer never shifts
the draws seen by existing ones.
"""

import hashlib

import numpy as np

STREAMS = ("init", "data", "domain-sampling", "corpus")


def _name_key(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed, name):
    """A numpy Generator for ``name`` derived from the 64-bit root ``seed``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _name_key(name)])))
