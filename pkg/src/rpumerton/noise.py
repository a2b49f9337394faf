"""Counter-based Gaussian noise for reproducible, order-independent simulation.

Every (seed, stream, step) triple owns a disjoint Philox counter block; the
path index is the lane offset within the block.  Draws are therefore
independent of scheduling and chunking, and a prefix of a block is stable
under changes of the total path count.
"""

from __future__ import annotations

import numpy as np

STREAM_B = 0    # stock driver, shared with the factor
STREAM_BT = 1   # independent factor driver
STREAM_BB = 2   # randomization driver

_KEY_SPICE = 0x9E3779B97F4A7C15  # fixed second key word


def standard_normals(seed: int, stream: int, step: int, n: int) -> np.ndarray:
    """n standard normals for one (stream, time-step) block."""
    bitgen = np.random.Philox(key=[np.uint64(seed), np.uint64(_KEY_SPICE)],
                              counter=[0, 0, np.uint64(stream), np.uint64(step)])
    return np.random.Generator(bitgen).standard_normal(n)


def step_normals(seed: int, step: int, n: int, antithetic: bool,
                 streams=(STREAM_B, STREAM_BT, STREAM_BB)):
    """Noise triplet (zb, zbt, zbb) for one Euler step across all paths.

    With antithetic pairing the second half of every stream is the negation
    of the first half.
    """
    if antithetic:
        half = n // 2
        out = []
        for s in streams:
            z = standard_normals(seed, s, step, half)
            out.append(np.concatenate([z, -z]))
        return tuple(out)
    return tuple(standard_normals(seed, s, step, n) for s in streams)
