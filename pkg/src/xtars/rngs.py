"""Deterministic RNG derivation.

Per-item generators are derived from (global seed, item key) so that parallel
or reordered processing of records cannot change the output.
"""

import hashlib

import numpy as np


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Return a Generator keyed on ``seed`` and any number of string-able parts."""
    material = f"{seed}|" + "|".join(str(p) for p in parts)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
