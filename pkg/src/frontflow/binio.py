"""Shared helpers for the binary interchange formats."""

import hashlib


def checksum64(payload: bytes) -> int:
    """64-bit content checksum: low 8 bytes of SHA-256, little-endian."""
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
