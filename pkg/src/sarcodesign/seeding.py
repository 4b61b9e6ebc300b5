"""Split one root seed into independent per-stage streams."""

import zlib

import numpy as np


def derive_seed(root: int, *keys) -> int:
    """Deterministic child seed for ``root`` and a path of str/int keys."""
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(int(root), spawn_key=spawn)
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
