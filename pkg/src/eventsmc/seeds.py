"""Deterministic random-stream derivation.

All randomness in the package flows from one master seed. Sub-streams are
derived by hashing the seed together with string/int labels, so independent
work items (particle m, segment i, epoch e, ...) get reproducible streams that
do not depend on execution order. Serial and parallel schedules therefore
agree bit-for-bit.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_words(labels: tuple) -> list[int]:
    digest = hashlib.sha256(repr(labels).encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the sub-stream named by ``labels`` under ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFF] + _label_words(labels)
    return np.random.default_rng(np.random.SeedSequence(entropy))
