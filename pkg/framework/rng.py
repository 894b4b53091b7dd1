"""Counter-based random streams.

Every noise source (init, data order, latent draws, weight noise, dropout,
certificate noise) gets its own Philox generator keyed by the master seed,
the stream name and an integer index (step, epoch, ...). Turning one source
on or off therefore never shifts the draws of another.
"""
from __future__ import annotations

import zlib
from typing import Tuple

import numpy as np

STREAM_NAMES = ("init", "data", "latent", "weight", "dropout", "certificate")


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStream:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def _entropy(self, name: str, index: Tuple[int, ...]) -> list[int]:
        if name not in STREAM_NAMES:
            raise ValueError(f"unknown stream {name!r}; expected one of {STREAM_NAMES}")
        return [self.seed, _name_key(name), *[int(i) for i in index]]

    def generator(self, name: str, *index: int) -> np.random.Generator:
        """Fresh generator for substream `name` at position `index`."""
        seq = np.random.SeedSequence(self._entropy(name, index))
        return np.random.Generator(np.random.Philox(seq))

    def derive_seed(self, name: str, *index: int) -> int:
        seq = np.random.SeedSequence(self._entropy(name, index))
        return int(seq.generate_state(1, dtype=np.uint64)[0])

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"


def gaussian_sample(rng: np.random.Generator, shape) -> np.ndarray:
    """I.i.d. standard normal float64 entries; scaling is the caller's job."""
    return rng.standard_normal(shape, dtype=np.float64)
