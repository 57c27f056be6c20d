"""Named sub-seeds derived from one run seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, name: str, *extra: int) -> int:
    """Deterministic 32-bit seed for the stream ``name`` (plus optional integers)."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")
    ss = np.random.SeedSequence([int(seed), key, *(int(e) for e in extra)])
    return int(ss.generate_state(1)[0])


def sub_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name, *extra))
