"""Counter-based random streams keyed by (seed, stream ids)."""
import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed`` and a stream path.

    Distinct stream paths give independent streams; the same path always
    reproduces the same draws, regardless of which other streams were used.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
