"""Deterministic derivation of named random streams from one experiment seed.

Every stochastic component (data generation, weight init, shuffling, noise,
random attack starts) pulls from its own stream so that adding or reordering
one component never perturbs another.
"""

import hashlib

import numpy as np

__all__ = ["derive_rng", "tag_to_int"]


def tag_to_int(tag) -> int:
    """Map a stream tag (int or str) to a stable 64-bit integer."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng stream tags must be int or str, got {type(tag).__name__}")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Return an independent Generator keyed by (seed, *tags).

    The same (seed, tags) always yields the same stream; any change to a tag
    yields a statistically independent one.
    """
    entropy = [tag_to_int(seed)] + [tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
