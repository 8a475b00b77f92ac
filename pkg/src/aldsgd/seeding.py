"""Seed splitting.

Every random stream in a run derives from one 64-bit seed:

    numpy.random.SeedSequence(entropy=seed, spawn_key=(STREAM_IDS[label], *extra))

``extra`` carries sub-indices, e.g. the worker id for per-worker minibatch
streams. Streams never share state, so results do not depend on the order in
which workers (or sweep cells) are executed.
"""

from __future__ import annotations

import numpy as np

STREAM_IDS = {
    "init": 0,
    "laplacian": 1,
    "batch": 2,
    "spectral": 3,
    "data": 4,
}


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    if label not in STREAM_IDS:
        raise KeyError(f"unknown stream label {label!r}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAM_IDS[label], *map(int, extra)))
    return np.random.default_rng(ss)


def worker_streams(seed: int, label: str, m: int) -> list[np.random.Generator]:
    return [stream(seed, label, i) for i in range(m)]
