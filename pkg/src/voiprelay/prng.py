"""Pinned pseudo-random generator.

Drop sets and setup delays must be identical on every platform and Python
version, so we do not use :mod:`random` (whose algorithms may change).
The generator is xorshift64* (Vigna, 2016) with its state seeded through
SplitMix64 so that small or zero seeds still produce well-mixed streams.
"""

import hashlib

MASK64 = (1 << 64) - 1
_XS_MULT = 0x2545F4914F6CDD1D


def splitmix64(x):
    """One SplitMix64 step: returns ``(next_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def mix_seed(*parts):
    """Derive a 64-bit seed from any mix of ints and strings.

    Used to key per-cell / per-node streams by identity rather than by
    position, so reordering work never changes its randomness.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class XorShift64Star:
    def __init__(self, seed=0):
        _, state = splitmix64(int(seed) & MASK64)
        # xorshift state must be nonzero
        self._state = state or 0x9E3779B97F4A7C15

    def next_u64(self):
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self._state = x
        return (x * _XS_MULT) & MASK64

    def random(self):
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()
