"""Seeded random streams.

Every draw in a run comes from PCG64 generators derived from one 64-bit
seed through ``SeedSequence`` spawn keys, so data generation, parameter
init, batch shuffling and the H-divergence probe never share state.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "shuffle": 2,
    "probe": 3,
    "views": 4,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return an independent generator for ``name`` under ``seed``.

    ``extra`` integers further split the stream (e.g. per-stream index in
    two-view training).
    """
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *extra))
    return np.random.Generator(np.random.PCG64(ss))


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state
