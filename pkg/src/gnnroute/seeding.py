"""Stable seed derivation for paired, order-independent experiments."""

from __future__ import annotations

import hashlib


def derive_seed(master: int, experiment: str, index: int) -> int:
    """64-bit seed for episode ``index`` of ``experiment`` under ``master``.

    Hash-based, so episode ``i`` gets the same seed whether or not earlier
    episodes ran, and the value does not depend on Python's hash salt.
    """
    digest = hashlib.sha256(f"{int(master)}/{experiment}/{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
