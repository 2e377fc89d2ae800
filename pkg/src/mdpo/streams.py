"""Named, splittable random streams.

Every stochastic component draws from its own counter-based (Philox) generator
keyed by a master seed plus a tuple of string/int labels, e.g.
``stream(seed, "agent", 2, "round", 17)``.  Any subsystem can therefore be
re-run in isolation and reproduce its draws exactly.
"""

import hashlib

import numpy as np


def _label_key(label) -> int:
    digest = hashlib.sha256(repr(label).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Return an independent generator for (seed, labels)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_key(x) for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
