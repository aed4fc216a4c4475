"""Seeded random streams.

All randomness in a run flows from one job seed through named substreams, so
individual stages (init noise, blend noise, loss probes) are independently
reproducible and ablatable.
"""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of a job seed.

    Stable across processes and platforms (crc32-based, not Python hash()).
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)))
