"""Counter-based random streams.

All randomness is drawn from Philox generators keyed by
``(seed, crc32(stream name), block index)``. Paths are grouped in blocks of a
fixed size, so the numbers a path receives depend only on the seed, the stream
name and the path index, never on how many workers process the blocks.
"""

from __future__ import annotations

import zlib

import numpy as np

FORWARD = "forward"
FRESH_RESIDUAL = "fresh-residual"
VALIDATION = "validation"

DEFAULT_BLOCK_SIZE = 4096


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), int(index)])
    return np.random.Generator(np.random.Philox(key))


def blocks(n_paths: int, block_size: int = DEFAULT_BLOCK_SIZE):
    """Yield ``(block_index, start, stop)`` covering ``range(n_paths)``."""
    for b, lo in enumerate(range(0, n_paths, block_size)):
        yield b, lo, min(lo + block_size, n_paths)
