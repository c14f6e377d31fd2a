"""Seed fan-out: one user seed feeds independent named substreams."""

import os
import zlib

import numpy as np
import torch

STREAMS = ("data", "noise", "init", "training")


def substream_seed(seed: int, name: str) -> int:
    """Derive a 63-bit seed for the stream ``name`` from ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**32], dtype=np.uint64)) >> 1


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator: the same (seed, *keys) always gives the same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def deterministic_requested() -> bool:
    return os.environ.get("ISCL_DETERMINISTIC", "") == "1"


def configure_determinism(force: bool | None = None) -> bool:
    """Switch torch to deterministic kernels when ``ISCL_DETERMINISTIC=1``."""
    on = deterministic_requested() if force is None else force
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return on
