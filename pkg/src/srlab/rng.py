"""Named random substreams derived from one master seed.

``substream(7, "pgd/epoch=3/batch=2")`` always yields the same generator,
independent of how many other streams were drawn before it.
"""
import hashlib

import numpy as np


def _key(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def substream(seed, name):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=_key(name))))


def child_seed(seed, name):
    """Integer seed for APIs that want a plain int."""
    return int(substream(seed, name).integers(0, 2**63 - 1))
