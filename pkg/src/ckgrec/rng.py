"""Deterministic seed derivation.

Every stochastic component (splitting, pool sampling, Gumbel noise,
interaction masking, negative sampling, ...) owns its own stream derived
from the master seed plus a string tag, so enabling or disabling one
component never shifts the draws of another.
"""

import hashlib


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit seed from a master seed and a tag tuple.

    Uses sha256 rather than hash() so results are identical across
    processes and platforms.
    """
    payload = repr((int(master),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
