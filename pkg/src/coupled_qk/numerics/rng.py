"""Counter-based, splittable pseudo-randomness.

Backed by numpy's Philox generator. The 128-bit Philox key packs the 64-bit
seed in its low word and a stream index in its high word, so every
(seed, stream) pair is an independent, platform-stable stream.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1


def stream_id(label: str) -> int:
    """Stable stream index for a textual label (e.g. a parameter name)."""
    return zlib.crc32(label.encode("utf-8")) + 1


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream: Union[int, str]) -> "Rng":
        """Independent child stream; ``stream`` may be an int or a label."""
        if isinstance(stream, str):
            stream = stream_id(stream)
        # mix parent stream in so grandchildren differ from children
        return Rng(self.seed, (self.stream * 1_000_003 + int(stream) + 1) & _MASK64)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
        if std < 0:
            raise ValueError("std must be non-negative")
        return Tensor(self.normal_np(shape, mean, std))

    def normal_np(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return mean + std * self._gen.standard_normal(shape)

    def uniform(self, shape=None, lo: float = 0.0, hi: float = 1.0):
        return self._gen.uniform(lo, hi, shape)

    def uniform_int(self, lo: int, hi: int) -> int:
        if lo >= hi:
            raise ValueError("uniform_int needs lo < hi")
        return int(self._gen.integers(lo, hi))

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        if lo >= hi:
            raise ValueError("integers needs lo < hi")
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, values, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(values, size=size, replace=replace)

    # state round-trip for checkpointing
    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return _jsonable(st)

    def set_state(self, state: dict) -> None:
        st = dict(state)
        inner = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
        st["state"] = inner
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
        self._gen.bit_generator.state = st


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
