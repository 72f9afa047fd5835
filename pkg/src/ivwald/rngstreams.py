"""Deterministic, platform-independent random number streams.

All randomness in this package flows through Philox, a counter-based
generator: the produced stream is a pure function of its 128-bit key, so a
(seed, stream index) pair fully determines every draw.  Replicates and
bootstrap resamples each get their own stream, which makes results identical
regardless of execution order or worker count.
"""

from __future__ import annotations

import numpy as np

# Fixed context tags keep independent uses of the same (seed, index) pair
# from colliding (e.g. replicate 3 of a simulation vs resample 3 of a
# bootstrap run on the same seed).
CTX_ROOT = 0
CTX_REPLICATE = 1
CTX_BOOTSTRAP = 2
CTX_ORACLE = 3

_MASK64 = (1 << 64) - 1


def stream(seed: int, context: int = CTX_ROOT, index: int = 0) -> np.random.Generator:
    """Return the Generator for stream (seed, context, index).

    The Philox key packs the user seed in the first word and
    (context << 56) | index in the second, so indices up to 2**56 - 1 are
    collision-free across contexts.
    """
    if not 0 <= index < (1 << 56):
        raise ValueError(f"stream index out of range: {index}")
    if not 0 <= context < 256:
        raise ValueError(f"stream context out of range: {context}")
    key = np.array(
        [int(seed) & _MASK64, ((context << 56) | index) & _MASK64],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
