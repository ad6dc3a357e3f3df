"""Seed fan-out: every component draws from its own labelled stream."""

from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, label, *extra)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([seed, label_key(label), *extra])
