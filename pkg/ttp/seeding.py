import zlib
from typing import Union

import numpy as np
import torch

Key = Union[int, str]


def _key(k: Key) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(root: int, *keys: Key) -> int:
    """Counter-based split of a 64-bit root seed: same (root, keys) -> same child."""
    seq = np.random.SeedSequence(int(root) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(k) for k in keys))
    # torch.Generator.manual_seed wants a value below 2**63
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(root: int, *keys: Key) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root, *keys))
    return g
