"""Deterministic RNG derivation.

Every random draw in the library flows from one root seed. Sub-streams are
derived by hashing a label path (e.g. ``("corpus", "shape", 17)``) into a
``SeedSequence`` spawn key, so changing one consumer's draws never shifts
another's. Hashes use blake2b and are stable across platforms and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]


def _label_key(labels: tuple) -> tuple[int, ...]:
    text = "/".join(repr(x) for x in labels)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def derive_seed(root_seed: int, *labels) -> np.random.SeedSequence:
    """Derive the seed sequence for a labeled sub-stream of ``root_seed``."""
    return np.random.SeedSequence(entropy=root_seed, spawn_key=_label_key(labels))


def derive_rng(root_seed: int, *labels) -> np.random.Generator:
    """A fresh PCG64 generator for the labeled sub-stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, *labels)))
