"""Seeded per-purpose random streams.

Every stochastic choice in the toolkit (weight init, reparameterization
noise, target-identity draws, gradient-penalty mixing, batch shuffling,
protection draws, attacker training) pulls from its own named substream
derived from one root seed, so runs are reproducible choice-by-choice and
adding draws to one purpose never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a 63-bit seed for the substream `name` from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(root_seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(root_seed, name))
    return g


def make_numpy_rng(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root_seed, name))


class RngHub:
    """Lazily-created named torch generators, serializable for checkpoints."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._streams: dict[str, torch.Generator] = {}

    def get(self, name: str) -> torch.Generator:
        if name not in self._streams:
            self._streams[name] = make_generator(self.root_seed, name)
        return self._streams[name]

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: g.get_state() for name, g in sorted(self._streams.items())}

    def load_state_dict(self, states: dict[str, torch.Tensor]) -> None:
        for name, state in states.items():
            self.get(name).set_state(state.to(torch.uint8))
