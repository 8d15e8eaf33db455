"""Seed derivation and checksums.

All randomness in a run flows from one integer seed. Independent streams are
derived by XOR-ing the seed with the FNV-1a hash of a fixed label, so adding a
new consumer never perturbs existing ones.
"""

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK
    return h


def fnv1a64_hex(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def derive_seed(seed: int, label: str) -> int:
    return (int(seed) & _MASK) ^ fnv1a64(label.encode("utf-8"))


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))
