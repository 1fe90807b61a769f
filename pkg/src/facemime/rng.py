"""Seed management: every random draw in the package descends from one root seed.

Named streams keep consumers independent, so e.g. adding an extra draw in the
data sampler does not shift the weights the encoder is initialized with.
"""

import hashlib

import numpy as np
import torch


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit child seed for a named stream."""
    digest = hashlib.blake2s(f"{root_seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


class RngHub:
    """Hands out named torch / numpy generators derived from one root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def child_seed(self, name: str) -> int:
        return derive_seed(self.root_seed, name)

    def torch_gen(self, name: str) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(self.child_seed(name))
        return gen

    def numpy_gen(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.child_seed(name))
