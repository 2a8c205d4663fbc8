"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np

from clusterdec.scenarios import (
    ModelDims,
    random_mha_scenario,
    random_mla_scenario,
)

# Dimension pools keep every size divisible by the largest cluster under test.
_BATCHES = (1, 2, 4)
_HIDDEN = (16, 32)
_HEAD_DIMS = (8, 16)
_HEAD_COUNTS = (1, 2, 3)
_RANKS = (8, 16)


def random_dims(seed: int, max_seq: int = 64, dtype_bytes: int = 4, mla: bool = False) -> ModelDims:
    rng = np.random.default_rng(seed * 7919 + 13)
    return ModelDims(
        batch_size=int(rng.choice(_BATCHES)),
        hidden_dim=int(rng.choice(_HIDDEN)),
        n_heads=int(rng.choice(_HEAD_COUNTS)),
        head_dim=int(rng.choice(_HEAD_DIMS)),
        seq_len=int(rng.integers(1, max_seq + 1)),
        kv_lora_rank=int(rng.choice(_RANKS)) if mla else None,
        dtype_bytes=dtype_bytes,
    )


def random_scenario(kind: str, seed: int, n_blocks: int, dtype_bytes: int = 4, max_seq: int = 64):
    """Seeded scenario for one of the three dataflow kinds."""
    if kind == "fused_mla":
        dims = random_dims(seed, max_seq=max_seq, dtype_bytes=dtype_bytes, mla=True)
        return random_mla_scenario(dims, n_blocks=n_blocks, seed=seed)
    dims = random_dims(seed, max_seq=max_seq, dtype_bytes=dtype_bytes)
    return random_mha_scenario(dims, n_blocks=n_blocks, seed=seed)


def max_abs_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
