"""Counter-based random streams.

Every consumer derives its generator from ``(seed, stream, index)`` so results
do not depend on the order in which streams are drawn.
"""

import numpy as np

DATA = 1
INIT = 2
PATCH_SIZE = 3
BATCH = 4
DEPTH = 5


def make_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))
