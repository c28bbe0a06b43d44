"""Seed splitting: every random stream is derived from (top-level seed, role tag, index)."""
import zlib

import numpy as np


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    """Deterministic 32-bit seed for the stream named ``tag`` (and ``index``) under ``seed``."""
    ss = np.random.SeedSequence([seed % (2 ** 63), zlib.crc32(tag.encode()), index])
    return int(ss.generate_state(1)[0])
