"""Deterministic randomness.

Every stochastic operation takes an explicit stream.  Per-sample work uses
:func:`substream`, keyed on (seed, sample id), so results do not depend on
iteration order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def seeded_rng(seed: int) -> np.random.Generator:
    """A PCG64 stream; identical seeds yield identical draws across processes."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _id_words(sample_id: str) -> list[int]:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, sample_id: str) -> np.random.Generator:
    """Stream for one sample, independent of processing order."""
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *_id_words(sample_id)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return gen
