"""Deterministic seed derivation so every random stream is independent."""
from __future__ import annotations

import hashlib


def child_seed(seed: int, tag: str) -> int:
    """Stable 63-bit child seed for a named stream."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1
