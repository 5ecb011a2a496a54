"""Content hashing for artifact provenance chains.

Every persisted artifact (vocab, checkpoint, datastore, index) is identified
by the SHA-256 of its bytes; downstream artifacts embed the hashes of their
inputs so stale combinations are rejected instead of silently evaluated.
"""

from __future__ import annotations

import hashlib
from pathlib import Path


def sha256_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
