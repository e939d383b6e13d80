"""Master-seed splitting and strict-determinism switches.

Every random stream in a run (data, init, batching, masks, evaluation) is
derived from one master seed with :func:`derive_seed`. The derivation is a
``numpy.random.SeedSequence`` whose spawn key is the CRC32 of each label, so
the mapping is stable across processes and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(master: int, *labels) -> int:
    """Return a 63-bit seed for the stream named by ``labels``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_label_key(x) for x in labels))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def torch_generator(master: int, *labels) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(master, *labels))


def set_strict_deterministic(enabled: bool = True) -> None:
    """Pin reduction order: deterministic kernels and a single intra-op thread."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)
