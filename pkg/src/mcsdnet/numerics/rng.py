"""Seeded random streams.

All randomness (initialisation, shuffling, synthetic scenes) flows through
:class:`Rng`, a thin wrapper over numpy's Philox-4x64 counter-based bit
generator.  Philox's raw output is fixed by its published algorithm, so a
given seed produces the same stream on every platform.
"""
from __future__ import annotations

import json

import numpy as np


class Rng:
    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def uniform(self, low, high, shape, dtype=np.float32) -> np.ndarray:
        u = self.gen.random(shape, dtype=np.float64)
        return (low + (high - low) * u).astype(dtype)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self.gen.standard_normal(shape, dtype=np.float64).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        return Rng(_mix(self.seed, key))

    # -- state round-trip for checkpoints --------------------------------------
    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    def state_json(self) -> str:
        return json.dumps(self.get_state(), sort_keys=True)

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        r = cls(state["seed"])
        r.set_state(state)
        return r


def _mix(seed: int, key: int) -> int:
    # splitmix64 finaliser over (seed, key)
    z = (seed + 0x9E3779B97F4A7C15 * (int(key) + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)
