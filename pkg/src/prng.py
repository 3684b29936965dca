"""
Seeded pseudo-random numbers: splitmix64 seeding + xoshiro256**.

Pure integer arithmetic so every platform reproduces the same streams.
"""

import math
from typing import List, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int):
    """Returns (next_state, output)"""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator seeded through splitmix64"""

    def __init__(self, seed: int = 0):
        sm = seed & MASK64
        self.s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            self.s.append(out)
        self._spare_gauss = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError(f"randbelow needs n > 0, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def gauss(self) -> float:
        """Standard normal via Box-Muller; the second value of each pair is cached"""
        if self._spare_gauss is not None:
            value = self._spare_gauss
            self._spare_gauss = None
            return value
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = 2.0 * math.pi * u2
        self._spare_gauss = radius * math.sin(angle)
        return radius * math.cos(angle)

    def normal(self, shape: Sequence[int], std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) > 0 else 1
        values = [mean + std * self.gauss() for _ in range(count)]
        return np.array(values, dtype=np.float64).reshape(tuple(shape))

    def shuffle(self, items: List) -> None:
        """In-place Fisher-Yates"""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> List[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def sample(self, n: int, k: int) -> List[int]:
        """k distinct indices from range(n), in draw order"""
        if k > n:
            raise ValueError(f"cannot sample {k} items from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def fork(self, tag: int = 0) -> "Xoshiro256":
        """Independent generator derived from the current state; the parent does not advance"""
        mixed = tag & MASK64
        for word in self.s:
            mixed, _ = splitmix64(mixed ^ word)
        return Xoshiro256(mixed)


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-purpose seed, e.g. derive_seed(3, "stream")"""
    state = seed & MASK64
    for ch in tag.encode("utf-8"):
        state, out = splitmix64(state ^ ch)
        state = out
    return state
