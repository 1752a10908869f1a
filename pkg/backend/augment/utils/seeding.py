"""Deterministic seed streams derived from the run seed."""
import hashlib

import numpy as np
import torch


def derive_seed(base: int, *labels) -> int:
    """Stable 63-bit seed for a named sub-stream (independent of PYTHONHASHSEED)."""
    text = ':'.join([str(base), *map(str, labels)])
    digest = hashlib.sha256(text.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << 63) - 1)


def torch_generator(base: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base, *labels))
    return g


def numpy_rng(base: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *labels))
