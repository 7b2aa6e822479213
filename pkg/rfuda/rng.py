"""Deterministic random streams derived from (seed, key...) tuples."""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"stream keys must be non-negative, got {key}")
    return int(key)


def stream(seed: int, *keys: Key) -> np.random.Generator:
    """Return an independent generator for ``(seed, *keys)``.

    The same tuple always yields the same sequence, regardless of which
    thread or process asks for it.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
