"""Named random streams split from one run seed.

Each consumer (init, batch order, sweep) draws from its own stream, so adding
a new consumer never shifts the numbers another one sees.
"""

import zlib

import numpy as np


def derive_seed(seed: int, stream: str) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
