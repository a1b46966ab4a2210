"""Keyed RNG substreams.

Every stochastic component derives its own generator from a tuple of
integer keys, so parallel shards and resumed runs draw identical values
regardless of evaluation order.
"""

from __future__ import annotations

import numpy as np

# Fixed stream tags so unrelated consumers of the same (seed, epoch, idx)
# coordinates never collide.
STREAM_DATA = 1
STREAM_MASK = 2
STREAM_NOISE = 3
STREAM_DROPOUT = 4
STREAM_INIT = 5
STREAM_DECODE = 6
STREAM_EVAL = 7


def substream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))
