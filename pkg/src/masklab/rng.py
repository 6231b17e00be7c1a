"""Counter-based random streams: (seed, labels...) -> independent generator.

Every run of every command derives its stream from the global seed plus
stable string/int labels, so parallel fan-out produces the same numbers
regardless of worker count or scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(_label_to_int(x) for x in labels)
    )


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Independent Philox stream for (seed, labels...)."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *labels)))


def run_streams(seed: int, label, count: int, start: int = 0) -> list[np.random.Generator]:
    """Per-run streams for ``count`` runs indexed from ``start``."""
    return [make_rng(seed, label, i) for i in range(start, start + count)]
