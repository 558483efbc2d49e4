"""Counter-based random streams keyed by (seed, purpose, indices)."""

import zlib

import numpy as np

PURPOSES = ("data", "folds", "bootstrap", "replication", "jitter", "learner")


def _purpose_code(purpose):
    # crc32 keeps the code stable across interpreter runs (hash() is salted)
    return zlib.crc32(purpose.encode("utf-8"))


def substream(seed, purpose, *indices):
    """Return an independent Philox generator for one purpose.

    The same (seed, purpose, indices) always yields the same stream, so
    work can be split across threads or processes without changing results.
    """
    if purpose not in PURPOSES:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    key = (_purpose_code(purpose),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
