"""Counter-style random streams keyed on (seed, stream, chunk)."""
from __future__ import annotations

import numpy as np


def chunk_generator(seed: int, stream: int, chunk: int) -> np.random.Generator:
    """Independent Philox generator for one work unit.

    Work units never share state, so results do not depend on the order
    (or thread) in which chunks are evaluated.
    """
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), stream, chunk])))
