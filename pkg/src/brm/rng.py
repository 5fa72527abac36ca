"""Counter-based random streams.

Every stream is a Philox generator whose 128-bit key packs ``(seed, stream)``.
Two callers asking for the same pair get the same sequence, which is what the
coupled stability runs rely on to share minibatch indices.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream-id namespaces so that unrelated consumers never collide
DATA = 0
INDEX = 1 << 32
NEIGHBOR = 2 << 32
PROBE = 3 << 32
SUBSAMPLE = 4 << 32
MDP = 5 << 32


def stream(seed: int, stream_id: int = 0, step: int = 0) -> np.random.Generator:
    """Generator keyed by ``(seed, stream_id)`` positioned at block ``step``."""
    key = (int(seed) & _MASK64) | ((int(stream_id) & _MASK64) << 64)
    bitgen = np.random.Philox(key=key)
    if step:
        bitgen = bitgen.advance(int(step))
    return np.random.Generator(bitgen)
