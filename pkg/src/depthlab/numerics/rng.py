"""Counter-based, splittable random streams.

Every stream is a Philox-4x64 generator keyed by ``(master_seed,
stream_index)``; the Philox counter is the only mutable state. Child
streams get a new index from a splitmix64 hash of ``(stream_index, i)``,
so the tree of streams is a pure function of the master seed.
"""

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class RngStream:
    """Deterministic Gaussian/integer source identified by (master_seed, stream_index)."""

    def __init__(self, master_seed, stream_index=0):
        self.master_seed = int(master_seed) & _MASK
        self.stream_index = int(stream_index) & _MASK
        key = np.array([self.master_seed, self.stream_index], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"

    def child(self, i):
        """Independent sub-stream; does not advance this stream."""
        return RngStream(self.master_seed, _splitmix64(self.stream_index ^ _splitmix64(int(i) + 1)))

    @property
    def counter(self):
        return tuple(int(c) for c in self._gen.bit_generator.state["state"]["counter"])

    def normal(self, shape, std=1.0):
        z = self._gen.standard_normal(shape)
        if std != 1.0:
            z *= std
        return z

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)


def gaussian_matrix(rows, cols, std, stream):
    """``rows x cols`` matrix of iid N(0, std^2) draws; always consumes rows*cols normals."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix shape must be positive, got {rows}x{cols}")
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = stream.normal((rows, cols))
    if std == 0:
        return np.zeros((rows, cols))
    if std != 1.0:
        z *= std
    return z
