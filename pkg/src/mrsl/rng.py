"""Deterministic seeding for every stochastic operation.

All randomness in this package flows through Philox (a counter-based 64-bit
generator), keyed by seeds derived with `derive_seed`.  Sub-tasks (folds,
grid cells, forest trees, simulated subjects) get their own derived seed, so
parallel and serial execution orders produce bit-identical results.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _token(p) -> int:
    if isinstance(p, str):
        h = 0xC0FFEE ^ len(p)
        for b in p.encode("utf-8"):
            h = _splitmix64((h << 8 | b) & _MASK64)
        return h
    return (int(p) + 0x51ED2701) & _MASK64


def derive_seed(seed: int, *path) -> int:
    """Derive a child seed from a root seed and a path of indices.

    Path elements are integers (fold/cell/tree/subject indices) or short
    strings naming a role ("fold", "refit", ...).  Deterministic and
    platform independent; distinct paths give unrelated streams.  Passing no
    path elements just masks the seed to 64 bits.
    """
    s = seed & _MASK64
    for p in path:
        s = _splitmix64(s ^ _splitmix64(_token(p)))
    return s


def make_rng(seed: int, *path) -> np.random.Generator:
    """A Philox generator keyed by ``derive_seed(seed, *path)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *path)))
