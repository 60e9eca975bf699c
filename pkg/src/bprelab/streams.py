"""Counter-based splittable random number streams.

Every stochastic routine in the package takes an explicit
``numpy.random.Generator``.  Runs derive their generators here, keyed by
(master seed, stage label, batch index), so that

  * the same key always yields the same stream (reproducibility),
  * distinct keys yield statistically independent streams (splittability),
  * batches can be mapped over workers in any order and merged in a fixed
    order with bitwise-identical results.

The underlying bit generator is Philox, a counter-based generator; key
separation is delegated to ``numpy.random.SeedSequence`` spawn keys.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_key_int(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFFFFFFFFFF


def substream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for key ``(master_seed, *path)``.

    ``path`` components may be ints (batch indices) or strings (stage
    labels); strings are hashed with CRC-32 so labels stay stable across
    sessions.
    """
    spawn_key = tuple(_as_key_int(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(seq))
