"""Named-stream seed derivation.

Every random decision in a run flows from one base seed through labelled
substreams, so changing how one module consumes randomness cannot perturb
any other module's stream.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(base: int, *labels: str) -> int:
    """Derive a 64-bit child seed from a base seed and a label path."""
    material = str(base) + "\x1f" + "\x1f".join(labels)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(base: int, *labels: str) -> random.Random:
    """A dedicated RNG for one named purpose."""
    return random.Random(derive_seed(base, *labels))


def content_bytes(base: int, size: int, *labels: str) -> bytes:
    """Deterministic pseudo-random payload bytes for a labelled entity."""
    if size < 0:
        raise ValueError("size must be non-negative")
    return substream(base, *labels).randbytes(size)
