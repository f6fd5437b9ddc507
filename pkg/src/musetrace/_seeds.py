"""Deterministic seed derivation for pipeline stages.

Every random choice in the package is driven by a numpy Generator whose seed
is derived from one root seed plus a label path. Hashing keeps the substreams
statistically unrelated while staying reproducible across platforms and runs.
"""

from __future__ import annotations

import hashlib


def derive_seed(root_seed: int, *labels: object) -> int:
    """Return a 64-bit seed derived from `root_seed` and a label path."""
    text = ":".join([str(int(root_seed))] + [str(part) for part in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
