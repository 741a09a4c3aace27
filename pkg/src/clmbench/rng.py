"""Deterministic counter-based random streams.

All randomness in the package flows from one master seed through named
substreams, so any unit of work (a patient, a grid cell, a bootstrap node)
can be regenerated in isolation and work can be parallelized without
changing output.
"""

import hashlib

import numpy as np


def _tag_words(tag) -> list[int]:
    # Stable hash of the tag's repr; ints pass through untouched so
    # substream(seed, i) depends only on (seed, i).
    if isinstance(tag, (int, np.integer)):
        return [int(tag) & 0xFFFFFFFF, (int(tag) >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *tags) -> np.random.Generator:
    """Return a Philox generator keyed by (seed, *tags).

    Distinct tag paths give statistically independent streams; the same path
    always gives the same stream regardless of call order.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        entropy.extend(_tag_words(tag))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
