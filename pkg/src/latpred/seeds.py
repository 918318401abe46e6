"""Hierarchical random-stream derivation.

Every run owns one root seed; independent streams are derived from it by a
(path of) purpose labels and indices, e.g. ``rng_for(root, "episode", 17)``.
Adding a new consumer with its own label never perturbs existing streams,
which is what makes logs reproducible across code changes and worker counts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _to_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("seed path components must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(root_seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root_seed),
                                  spawn_key=tuple(_to_key(p) for p in path))


def rng_for(root_seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by (root, *path)."""
    return np.random.default_rng(seed_sequence(root_seed, *path))


def derive_seed(root_seed: int, *path) -> int:
    """A plain integer seed for APIs that take one."""
    return int(seed_sequence(root_seed, *path).generate_state(1)[0])
