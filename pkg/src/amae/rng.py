"""Named, splittable random streams.

Every consumer of randomness receives its own :class:`numpy.random.Generator`
built on the counter-based Philox bit generator. Streams are addressed by a
root seed plus a path of names/indices, so ``stream(7, "stage2", "moduleA")``
is the same sequence on every run and independent of every other path.
"""

import zlib

import numpy as np


def _path_key(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream index must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed, *path):
    """Return a Philox generator for ``seed`` addressed by ``path``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_path_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def split(rng, n):
    """Split ``rng`` into ``n`` independent child generators."""
    return rng.spawn(n)
