"""Small shared helpers: deterministic RNG derivation and hashing."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def as_generator(rng) -> np.random.Generator:
    """Accept an int seed or a Generator and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def child_rng(seed: int, *tags: int) -> np.random.Generator:
    """Derive an independent generator from an integer seed and tag path.

    The same (seed, tags) always yields the same stream, which is what makes
    whole runs reproducible without threading Generator objects everywhere.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def stable_hash(obj) -> str:
    """SHA-256 of a canonical JSON encoding; used for cache keys and manifests."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_encode)
    return hashlib.sha256(payload.encode()).hexdigest()


def array_hash(arr: np.ndarray) -> str:
    """SHA-256 of an array's float64 bytes plus its shape."""
    a = np.ascontiguousarray(arr, dtype=np.float64)
    h = hashlib.sha256(a.tobytes())
    h.update(str(a.shape).encode())
    return h.hexdigest()


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON-encodable: {type(obj)}")
