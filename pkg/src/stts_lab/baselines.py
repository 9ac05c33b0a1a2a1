"""Score-free frame selection baselines (random and uniform Top-K)."""
from __future__ import annotations

import numpy as np


def baseline_select(kind: str, T: int, K: int, seed: int = 0) -> list:
    """K sorted frame indices out of T.

    ``random`` draws without replacement; ``uniform`` takes floor(i*T/K).
    """
    if not 1 <= K <= T:
        raise ValueError(f"need 1 <= K <= T, got K={K}, T={T}")
    if kind == "uniform":
        return [i * T // K for i in range(K)]
    if kind == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(T, size=K, replace=False))
    raise ValueError(f"unknown baseline {kind!r}; expected 'random' or 'uniform'")


def batch_select(kind: str, T: int, K: int, batch: int, seed: int) -> np.ndarray:
    """(batch, K) baseline indices; row b uses its own seed stream."""
    seeds = np.random.SeedSequence(seed).generate_state(batch) if kind == "random" else [0] * batch
    return np.array([baseline_select(kind, T, K, int(s)) for s in seeds], dtype=np.int64)
