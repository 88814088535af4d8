"""Small hashing helpers shared across the pipeline."""

from __future__ import annotations

import hashlib


def content_hash(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (unlike ``hash``, not salted per process)."""
    return int(content_hash(*(str(p) for p in parts))[:15], 16)
