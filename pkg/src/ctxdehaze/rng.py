"""Labeled sub-seed derivation so every random stream is reproducible on its own."""
import hashlib

import numpy as np
import torch


def derive_seed(seed, *labels):
    h = hashlib.sha256(repr((int(seed),) + tuple(str(l) for l in labels)).encode())
    return int.from_bytes(h.digest()[:8], "little") & ((1 << 63) - 1)


def numpy_rng(seed, *labels):
    return np.random.default_rng(derive_seed(seed, *labels))


def torch_gen(seed, *labels):
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *labels))
    return g
