import hashlib

import numpy as np


def sub_seed(seed, name):
    """Derive a named 63-bit sub-seed from a root seed."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed, name):
    return np.random.default_rng(sub_seed(seed, name))
