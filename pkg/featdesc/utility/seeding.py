import hashlib

import numpy as np


def derive_seed(base: int, *parts) -> int:
    """Stable 63-bit seed from a base seed and any labels (feature key, prompt index, ...)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode("utf-8"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "big") >> 1


def rng_for(base: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *parts))
