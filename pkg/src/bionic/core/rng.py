"""Counter-based random streams.

A stream is a Philox generator keyed by ``(seed, stream_id)``, so the n-th
draw of a stream depends only on those two integers and n. Substreams are
derived by hashing extra keys (epoch, sample index, ...) into a new id.
"""

from __future__ import annotations

import zlib

import numpy as np

# fixed ids for the named streams used during training
STREAMS = {"init": 1, "shuffle": 2, "augment": 3, "noise": 4, "data": 5, "connectome": 6}

_MASK64 = (1 << 64) - 1


def stream_id(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & _MASK64
    if name in STREAMS:
        return STREAMS[name]
    return zlib.crc32(str(name).encode()) | (1 << 32)


class RngStream:
    def __init__(self, seed: int, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream_id = stream_id(stream)
        self.generator = np.random.Generator(np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64)))

    def substream(self, *keys: int) -> "RngStream":
        entropy = [self.seed, self.stream_id] + [int(k) & _MASK64 for k in keys]
        derived = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
        return RngStream(self.seed, int(derived))

    def named(self, name) -> "RngStream":
        """Sibling stream for ``name`` under the same seed."""
        return RngStream(self.seed, name)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"
