from __future__ import annotations

import hashlib


def stable_hash(text: str, salt: str = "") -> int:
    """64-bit platform-independent hash (``hash()`` is salted per process)."""
    digest = hashlib.blake2b((salt + "\x00" + text).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
