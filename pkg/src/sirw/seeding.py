"""Replica-indexed stream seeds.

Each replica gets its own 64-bit seed from a SplitMix64-style mix of
(master seed, experiment id, replica index).  Streams are therefore
independent of scheduling and worker count.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def experiment_id(name: str) -> int:
    return zlib.crc32(name.encode())


def split(seed: int, experiment: str | int, replica: int) -> int:
    """Stream seed for one replica; chains three rounds of splitmix64."""
    eid = experiment_id(experiment) if isinstance(experiment, str) else int(experiment)
    h = splitmix64(int(seed) & MASK64)
    h = splitmix64(h ^ (eid & MASK64))
    return splitmix64(h ^ (int(replica) & MASK64))


def replica_rng(seed: int, experiment: str | int, replica: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(split(seed, experiment, replica)))
