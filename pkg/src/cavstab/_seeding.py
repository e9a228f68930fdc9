from __future__ import annotations

import numpy as np


def child_seed(*keys: int) -> int:
    """64-bit seed derived from a tuple of nonnegative integer keys.

    Depends only on the keys, so work can be scheduled in any order.
    """
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def child_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(*keys))
