"""Per-trial random streams.

Every Monte Carlo trial owns an independent generator keyed by
``(master_seed, trial_index)`` through :class:`numpy.random.SeedSequence`.
A trial's draws therefore never depend on which worker ran it, on the
batch it was grouped with, or on how many trials were requested.
"""

import hashlib

import numpy as np


def make_rng(seed, trial=None):
    """Generator for ``seed`` alone, or for trial ``trial`` under master ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    elif trial is None:
        ss = np.random.SeedSequence(int(seed))
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=(int(trial),))
    return np.random.Generator(np.random.SFC64(ss))


def trial_seed_sequences(master_seed, trials):
    return [np.random.SeedSequence(int(master_seed), spawn_key=(i,)) for i in range(trials)]


def seeds_digest(seeds):
    """SHA-256 over the initial state words of each trial's seed sequence."""
    h = hashlib.sha256()
    for ss in seeds:
        h.update(ss.generate_state(4, np.uint64).tobytes())
    return h.hexdigest()
