"""Deterministic fan-out of one global seed.

``derive_seed(seed, name)`` is the first 8 bytes (little-endian, top bit
cleared) of sha256(f"{seed}/{name}").  Every consumer of randomness asks for
its own named stream, so adding a consumer never shifts another's draws.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


def torch_gen(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, name))


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))
