"""Deterministic random streams.

All randomness in the package flows through numpy Generators backed by PCG64.
Independent streams are derived from a root seed with SeedSequence entropy
lists ``[seed, stream_tag, index...]``, which is stable across platforms and
numpy releases. Two calls with the same keys yield bit-identical draws.
"""

from __future__ import annotations

import numpy as np

# stream tags; keep these stable, they are part of run reproducibility
INIT = 0
SAMPLER = 1
AUGMENT = 2
DROPOUT = 3
DATA = 4


def make_rng(*keys: int) -> np.random.Generator:
    """Build a PCG64 Generator from an entropy key list.

    make_rng(seed) for a root stream, make_rng(seed, SAMPLER, epoch) and
    friends for derived streams that must not collide.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))
