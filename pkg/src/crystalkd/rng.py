"""Named, seed-derived random streams.

Every consumer of randomness asks for its own stream by name (``"init"``,
``"shuffle"``, ``"negative-sampling"``, ``"synthetic"``, ...). A stream is a
numpy ``PCG64`` generator seeded with ``SeedSequence([seed, crc32(name)])``,
so streams are independent of each other, of the platform, and of Python's
hash randomization.
"""
import zlib

import numpy as np

from .errors import DomainError


def rng_stream(seed: int, name: str) -> np.random.Generator:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise DomainError(f"seed must be a non-negative integer, got {seed!r}")
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
