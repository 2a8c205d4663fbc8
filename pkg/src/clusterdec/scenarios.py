"""Decode-step scenarios: model dimensions, weights, caches, and inputs.

A scenario describes one decoding step: a batch of new-token hidden states,
the attention weights, and the cached keys/values from previously decoded
tokens. Two attention kinds are supported:

* ``mha``: per-head QKV projection weights and per-head K/V caches.
* ``mla``: low-rank latent attention. Queries are projected per head into a
  shared latent space of width ``kv_lora_rank``; a single latent cache is
  shared by all heads and serves as both keys and values.

All arrays are float32. With ``dtype_bytes == 2`` every generated array is
pre-rounded to the nearest half-precision value so reference and simulated
paths consume identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, ShapeMismatch
from .simcore import ClusterConfig, dtype_tag_for_bytes, quantize

MHA = "mha"
MLA = "mla"


@dataclass(frozen=True)
class ModelDims:
    batch_size: int
    hidden_dim: int
    n_heads: int
    head_dim: int
    seq_len: int  # cached tokens; the decode step appends batch_size more
    kv_lora_rank: int | None = None
    dtype_bytes: int = 4

    def __post_init__(self):
        for field_name in ("batch_size", "hidden_dim", "n_heads", "head_dim"):
            if getattr(self, field_name) < 1:
                raise DimensionError(f"{field_name} must be >= 1")
        if self.seq_len < 0:
            raise DimensionError("seq_len must be >= 0")
        dtype_tag_for_bytes(self.dtype_bytes)

    @property
    def dtype_tag(self) -> str:
        return dtype_tag_for_bytes(self.dtype_bytes)


@dataclass
class DecodeScenario:
    """Inputs for one decode step, plus the cluster it should run on."""

    kind: str  # "mha" or "mla"
    dims: ModelDims
    cluster: ClusterConfig
    hidden: np.ndarray  # (B, D) new-token hidden states
    seed: int = 0

    # mha weights/caches
    w_qkv: np.ndarray | None = None  # (n_heads, D, 3H)
    k_cache: np.ndarray | None = None  # (n_heads, S, H)
    v_cache: np.ndarray | None = None  # (n_heads, S, H)

    # mla weights/caches
    w_q: np.ndarray | None = None  # (n_heads, D, H) per-head query projection
    w_up: np.ndarray | None = None  # (n_heads, H, l) query-to-latent projection
    w_kv: np.ndarray | None = None  # (D, l) shared latent down-projection
    w_down: np.ndarray | None = None  # (n_heads, l, H) latent-to-head projection
    kv_cache: np.ndarray | None = None  # (S, l) shared latent cache

    # both kinds
    w_out: np.ndarray | None = None  # (n_heads, H, D) output projection

    def validate(self) -> None:
        d = self.dims
        if self.cluster.dtype_bytes != d.dtype_bytes:
            raise ShapeMismatch("cluster dtype_bytes must match dims.dtype_bytes")
        _expect(self.hidden, (d.batch_size, d.hidden_dim), "hidden")
        _expect(self.w_out, (d.n_heads, d.head_dim, d.hidden_dim), "w_out")
        if self.kind == MHA:
            _expect(self.w_qkv, (d.n_heads, d.hidden_dim, 3 * d.head_dim), "w_qkv")
            _expect(self.k_cache, (d.n_heads, d.seq_len, d.head_dim), "k_cache")
            _expect(self.v_cache, (d.n_heads, d.seq_len, d.head_dim), "v_cache")
        elif self.kind == MLA:
            rank = d.kv_lora_rank
            if rank is None:
                raise DimensionError("mla scenarios require dims.kv_lora_rank")
            _expect(self.w_q, (d.n_heads, d.hidden_dim, d.head_dim), "w_q")
            _expect(self.w_up, (d.n_heads, d.head_dim, rank), "w_up")
            _expect(self.w_kv, (d.hidden_dim, rank), "w_kv")
            _expect(self.w_down, (d.n_heads, rank, d.head_dim), "w_down")
            _expect(self.kv_cache, (d.seq_len, rank), "kv_cache")
        else:
            raise DimensionError(f"unknown scenario kind {self.kind!r}")


def _expect(arr: np.ndarray | None, shape: tuple[int, ...], name: str) -> None:
    if arr is None:
        raise ShapeMismatch(f"scenario field {name} is missing")
    if arr.shape != shape:
        raise ShapeMismatch(f"scenario field {name} has shape {arr.shape}, expected {shape}")


def _randn(rng: np.random.Generator, shape, scale: float, dtype_tag: str) -> np.ndarray:
    return quantize((rng.standard_normal(shape) * scale).astype(np.float32), dtype_tag)


def random_mha_scenario(
    dims: ModelDims,
    n_blocks: int = 1,
    seed: int = 0,
    smem_capacity_bytes: int | None = None,
) -> DecodeScenario:
    """Generate a seeded MHA scenario with O(1)-scaled activations.

    Projection weights are scaled by 1/sqrt(fan_in) so scores and outputs
    stay near unit magnitude regardless of the dimensions.
    """
    rng = np.random.default_rng(seed)
    d, tag = dims, dims.dtype_tag
    scenario = DecodeScenario(
        kind=MHA,
        dims=dims,
        cluster=ClusterConfig(n_blocks, smem_capacity_bytes, dims.dtype_bytes),
        hidden=_randn(rng, (d.batch_size, d.hidden_dim), 1.0, tag),
        seed=seed,
        w_qkv=_randn(rng, (d.n_heads, d.hidden_dim, 3 * d.head_dim), d.hidden_dim ** -0.5, tag),
        w_out=_randn(rng, (d.n_heads, d.head_dim, d.hidden_dim), d.head_dim ** -0.5, tag),
        k_cache=_randn(rng, (d.n_heads, d.seq_len, d.head_dim), 1.0, tag),
        v_cache=_randn(rng, (d.n_heads, d.seq_len, d.head_dim), 1.0, tag),
    )
    scenario.validate()
    return scenario


def random_mla_scenario(
    dims: ModelDims,
    n_blocks: int = 1,
    seed: int = 0,
    smem_capacity_bytes: int | None = None,
) -> DecodeScenario:
    """Generate a seeded MLA scenario (requires dims.kv_lora_rank)."""
    if dims.kv_lora_rank is None:
        raise DimensionError("random_mla_scenario requires dims.kv_lora_rank")
    rng = np.random.default_rng(seed)
    d, tag, rank = dims, dims.dtype_tag, dims.kv_lora_rank
    scenario = DecodeScenario(
        kind=MLA,
        dims=dims,
        cluster=ClusterConfig(n_blocks, smem_capacity_bytes, dims.dtype_bytes),
        hidden=_randn(rng, (d.batch_size, d.hidden_dim), 1.0, tag),
        seed=seed,
        w_q=_randn(rng, (d.n_heads, d.hidden_dim, d.head_dim), d.hidden_dim ** -0.5, tag),
        w_up=_randn(rng, (d.n_heads, d.head_dim, rank), d.head_dim ** -0.5, tag),
        w_kv=_randn(rng, (d.hidden_dim, rank), d.hidden_dim ** -0.5, tag),
        w_down=_randn(rng, (d.n_heads, rank, d.head_dim), rank ** -0.5, tag),
        w_out=_randn(rng, (d.n_heads, d.head_dim, d.hidden_dim), d.head_dim ** -0.5, tag),
        kv_cache=_randn(rng, (d.seq_len, rank), 1.0, tag),
    )
    scenario.validate()
    return scenario


def project_new_kv(scenario: DecodeScenario) -> np.ndarray:
    """New-token cache entries implied by the scenario's hidden states.

    Returns (n_heads, B, 2H) stacked [K_new | V_new] for MHA, or (B, l) new
    latent rows for MLA, rounded per the scenario dtype.
    """
    d, tag = scenario.dims, scenario.dims.dtype_tag
    if scenario.kind == MHA:
        h = d.head_dim
        new = np.stack(
            [scenario.hidden @ scenario.w_qkv[i][:, h:] for i in range(d.n_heads)]
        )
        return quantize(new, tag)
    return quantize(scenario.hidden @ scenario.w_kv, tag)


def with_preappended_cache(scenario: DecodeScenario) -> DecodeScenario:
    """Copy of the scenario with the new token's K/V already in the cache.

    Running a dataflow on the result with ``append_new_token=False`` must
    match the original run: the new token participates exactly once either
    way.
    """
    d = scenario.dims
    new_dims = replace(d, seq_len=d.seq_len + d.batch_size)
    if scenario.kind == MHA:
        new = project_new_kv(scenario)  # (n_heads, B, 2H)
        k_new, v_new = new[:, :, : d.head_dim], new[:, :, d.head_dim :]
        return replace(
            scenario,
            dims=new_dims,
            k_cache=np.concatenate([scenario.k_cache, k_new], axis=1),
            v_cache=np.concatenate([scenario.v_cache, v_new], axis=1),
        )
    latent_new = project_new_kv(scenario)  # (B, l)
    return replace(
        scenario,
        dims=new_dims,
        kv_cache=np.concatenate([scenario.kv_cache, latent_new], axis=0),
    )
