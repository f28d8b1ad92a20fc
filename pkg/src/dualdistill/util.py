"""Deterministic RNG streams and config digests."""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np


def rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Philox (64-bit counter-based) generator keyed by seed plus stream tags.

    String tags are hashed with crc32 so streams are stable across runs and
    platforms; ``rng(s, "shuffle", epoch)`` never collides with
    ``rng(s, "init")`` for any epoch.
    """
    entropy = [seed & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        entropy.append(zlib.crc32(t.encode()) if isinstance(t, str) else t & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    """Stable hex digest of a JSON-serializable config mapping."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
