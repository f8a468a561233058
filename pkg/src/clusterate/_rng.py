"""Seeded, splittable random streams.

Every stream is a PCG64 generator keyed by ``(seed, *key)`` through
``numpy.random.SeedSequence``; the key names the task (repeat, draw,
block...) so results never depend on scheduling or worker count.
"""

import numpy as np

from ._validation import check_seed

RNG_ALGORITHM = f"numpy-{np.__version__}/PCG64/SeedSequence"


def stream(seed, *key) -> np.random.Generator:
    """Independent generator for substream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
