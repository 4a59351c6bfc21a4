"""Named, independently seedable random streams.

Each consumer (data generation, parameter init, trace sampling, negative
sampling, ...) draws from its own PCG64 stream derived from one run seed, so
re-seeding or adding draws in one component never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "sampling": 2,
    "negatives": 3,
    "teacher": 4,
    "batches": 5,
    "split": 6,
    "eval": 7,
}


def stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name
    if name in STREAMS:
        return STREAMS[name]
    return 1000 + zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    """PCG64 generator for ``(seed, stream)``; identical pairs give identical draws."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(stream_id(stream),))
    return np.random.Generator(np.random.PCG64(ss))
