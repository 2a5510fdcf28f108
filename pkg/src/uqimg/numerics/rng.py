"""Counter-based random streams on top of Philox-4x64.

A stream is keyed by ``(master_seed, stream_id)``; every draw starts at a
fresh counter block, so the output of a draw depends only on
``(master_seed, stream_id, counter)`` and never on what other streams did.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def _u64(x):
    return int(x) & _MASK64


def derive_stream_id(parent, *path):
    """Hash a stream id and a path of integers into a new 64-bit stream id."""
    words = [_u64(parent)] + [_u64(p) for p in path]
    seq = np.random.SeedSequence(words)
    return int(seq.generate_state(1, dtype=np.uint64)[0])


class RngStream:
    def __init__(self, master_seed, stream_id=0, counter=0):
        self.master_seed = _u64(master_seed)
        self.stream_id = _u64(stream_id)
        self.counter = _u64(counter)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id}, counter={self.counter})"

    def state(self):
        return (self.master_seed, self.stream_id, self.counter)

    def copy(self):
        return RngStream(self.master_seed, self.stream_id, self.counter)

    def child(self, *path):
        """Independent stream for a sub-task (member, example, ...)."""
        return RngStream(self.master_seed, derive_stream_id(self.stream_id, *path))

    def _draw(self, fn):
        bitgen = np.random.Philox(
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
            key=np.array([self.master_seed, self.stream_id], dtype=np.uint64),
        )
        out = fn(np.random.Generator(bitgen))
        used = int(bitgen.state["state"]["counter"][0])
        self.counter = _u64(used + 1)
        return out

    def normal(self, shape):
        return self._draw(lambda g: g.standard_normal(shape))

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._draw(lambda g: g.uniform(low, high, size=shape))

    def integers(self, low, high=None, shape=None):
        return self._draw(lambda g: g.integers(low, high, size=shape))

    def permutation(self, n):
        return self._draw(lambda g: g.permutation(n))

    def choice(self, n, size, replace=False):
        return self._draw(lambda g: g.choice(n, size=size, replace=replace))


def rng_draw_normal(stream, shape):
    return stream.normal(shape)
