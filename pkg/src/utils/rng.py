import numpy as np


def split_generator(seed: int, *counters: int) -> np.random.Generator:
    """
    Independent random stream for (seed, counters...).

    Streams for different counters do not depend on the order in which they
    are created, so restarts give the same draws sequentially or in threads.
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(c) for c in counters))
    return np.random.default_rng(sequence)
