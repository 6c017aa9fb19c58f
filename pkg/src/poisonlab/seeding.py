"""Deterministic sub-seed derivation.

Every pipeline stage draws its randomness from a seed derived by hashing the
master seed together with the stage name, so stages can be added, removed or
reordered without perturbing each other's streams.
"""

import hashlib


def stage_seed(master_seed: int, stage: str) -> int:
    """64-bit sub-seed for a named stage under a master seed."""
    digest = hashlib.sha256(f"{int(master_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
