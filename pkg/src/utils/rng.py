"""
Counter-based random streams.

A stream is keyed by (seed, stream_id) on a Philox generator, so the draw at
(seed, stream_id, counter) is a pure function of the triple and distinct
stream ids are independent.
"""
from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    """Philox-backed random stream."""
    seed: int
    stream_id: int = 0
    start: int = 0  # Philox block counter the stream begins at
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.seed &= _MASK64
        self.stream_id &= _MASK64
        key = (self.stream_id << 64) | self.seed
        bitgen = np.random.Philox(key=key, counter=self.start & _MASK64)
        self.generator = np.random.Generator(bitgen)

    @property
    def counter(self) -> int:
        """Current Philox block counter; each block yields four 64-bit words."""
        return int(self.generator.bit_generator.state["state"]["counter"][0])

    def at(self, counter: int) -> "RngStream":
        """The same (seed, stream_id) stream positioned at another block counter."""
        return RngStream(self.seed, self.stream_id, counter)

    def child(self, *keys: int) -> "RngStream":
        """Derive an independent stream for a structured key such as (step, slot)."""
        entropy = [self.seed, self.stream_id, *[int(k) & _MASK64 for k in keys]]
        mixed = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
        return RngStream(self.seed, int(mixed))

    # Convenience passthroughs

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) draws resampled until inside ±bound·std."""
        out = self.generator.normal(0.0, std, size=shape)
        limit = bound * std
        bad = np.abs(out) > limit
        while bad.any():
            out[bad] = self.generator.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > limit
        return out
