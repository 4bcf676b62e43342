"""Root-seed splitting.

Every random stream in the package is derived from a single root seed as
``SeedSequence([root, crc32(stage_tag), *indices])``.  Two runs that share the
root seed, the stage tag and the indices see the same numbers, which is what
paired-seed detector comparisons rely on.
"""

from __future__ import annotations

import zlib

import numpy as np


def stage_seed(root: int, tag: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(tag.encode()), *map(int, indices)])


def stage_rng(root: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(stage_seed(root, tag, *indices))


def stage_int(root: int, tag: str, *indices: int) -> int:
    """A plain 32-bit integer seed for APIs that take ints."""
    return int(stage_seed(root, tag, *indices).generate_state(1)[0])
