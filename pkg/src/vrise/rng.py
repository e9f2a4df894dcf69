"""Deterministic random-stream derivation shared by every stochastic component.

All randomness in the package flows through counter-based Philox streams keyed
by ``(master_seed, domain, index...)``. A consumer that needs the i-th draw of
some domain derives the stream for i directly instead of advancing a shared
generator, so results never depend on scheduling, batching, or worker count.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep independent consumers of one master seed from colliding.
DOMAIN_SEEDS = 0  # Voronoi seed sampling, keyed by mesh index
DOMAIN_SELECTOR = 1  # occlusion selector draws, keyed by draw index
DOMAIN_SHIFT = 2  # random crop indents, keyed by draw index
DOMAIN_FIX = 3  # hybrid replacement rounds, keyed by (draw index, round)
DOMAIN_EXPERIMENT = 4  # experiment-level sampling

__all__ = [
    "DOMAIN_SEEDS",
    "DOMAIN_SELECTOR",
    "DOMAIN_SHIFT",
    "DOMAIN_FIX",
    "DOMAIN_EXPERIMENT",
    "derive_seed_sequence",
    "derive_rng",
    "stable_seed",
]


def derive_seed_sequence(master_seed: int, *key: int) -> np.random.SeedSequence:
    """Seed sequence for the stream identified by ``(master_seed, *key)``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(master_seed, *key)``.

    Streams depend only on the key tuple, never on how many draws other
    streams have made, so any number of them can be consumed in parallel
    without changing any output.
    """
    return np.random.Generator(np.random.Philox(derive_seed_sequence(master_seed, *key)))


def stable_seed(master_seed: int, *parts: object) -> int:
    """Collapse arbitrary labels (digests, image ids, run numbers) to a seed.

    Uses SHA-256 over a canonical rendering, so the result is stable across
    processes and platforms, unlike ``hash()``.
    """
    import hashlib

    text = repr((int(master_seed),) + tuple(str(p) for p in parts))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
