"""Fused decoding dataflows executed on a simulated cluster.

Three dataflows produce a decode output plus a byte-accurate traffic ledger:

* ``split_token`` (MHA): blocks slice the head dimension for the QKV
  projection, all-gather the full Q/K/V, attend over disjoint KV-cache
  sequence segments, merge softmax statistics, reduce the attention output,
  and each block writes its output-dimension slice with atomic accumulation.
* ``fused_mla``: the latent-attention variant. Blocks slice the query
  projection and the shared latent down-projection, gather both, slice the
  query-to-latent projection and gather again, attend over latent cache
  segments (the latent serves as both keys and values), then reduce the
  attention output and the sliced latent-to-head projection.
* ``split_head``: blocks keep a head-dimension slice through all three
  stages; partial scores (contracted over the local slice) are
  sum-reduced across blocks before the softmax, and the sliced output
  projection is sum-reduced before a single atomic write.

One cluster is simulated per attention head; heads run sequentially and
deterministically, accumulating into a shared global output. The decode
step's new-token K/V rows enter the attention of exactly one block (the
owner of the final sequence segment) so they are counted once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import collectives as coll
from .errors import DimensionError, ShapeMismatch, SimulationError
from .scenarios import MHA, MLA, DecodeScenario
from .simcore import ClusterState, TrafficLedger, build_cluster

SPLIT_TOKEN = "split_token"
FUSED_MLA = "fused_mla"
SPLIT_HEAD = "split_head"
DATAFLOW_KINDS = (SPLIT_TOKEN, FUSED_MLA, SPLIT_HEAD)

TWO_PASS = "two_pass"
MERGED = "merged"


@dataclass(frozen=True)
class StageTrace:
    """One collective invocation attributed to a named dataflow stage."""

    stage: str
    head: int
    trace: coll.CollectiveTrace


@dataclass
class DecodeResult:
    output: np.ndarray  # (B, D)
    ledger: TrafficLedger
    stage_traffic: dict[str, int]  # dsmem bytes per stage, summed over heads
    score_max: np.ndarray  # (n_heads, B) global softmax max per head
    score_sum: np.ndarray  # (n_heads, B) global softmax denominator per head
    collectives: list[StageTrace] = field(default_factory=list)
    n_clusters: int = 0
    n_blocks: int = 1

    @property
    def dsmem_bytes(self) -> int:
        return self.ledger.channel_bytes("dsmem")


def partial_flash_attention(
    q: np.ndarray, k_seg: np.ndarray, v_seg: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attention over one key/value segment with running softmax statistics.

    Returns (a_partial, m_local, l_local) where m_local is the per-row score
    max, l_local the sum of exp(score - m_local), and a_partial the
    correspondingly weighted value sum. Scores are scaled by 1/sqrt(key
    width). An empty segment yields the merge identity (0, -inf, 0).
    """
    batch = q.shape[0]
    value_dim = v_seg.shape[1]
    if k_seg.shape[0] == 0:
        return (
            np.zeros((batch, value_dim), dtype=np.float32),
            np.full(batch, -np.inf, dtype=np.float32),
            np.zeros(batch, dtype=np.float32),
        )
    if k_seg.shape[0] != v_seg.shape[0] or q.shape[1] != k_seg.shape[1]:
        raise ShapeMismatch(
            f"partial_flash_attention: q {q.shape}, k {k_seg.shape}, v {v_seg.shape}"
        )
    scores = (q @ k_seg.T) / math.sqrt(k_seg.shape[1])
    m_local = scores.max(axis=1)
    weights = np.exp(scores - m_local[:, None])
    l_local = weights.sum(axis=1)
    return (weights @ v_seg).astype(np.float32), m_local.astype(np.float32), l_local.astype(
        np.float32
    )


def absorb_weights(w_q: np.ndarray, w_up: np.ndarray) -> np.ndarray:
    """Fold a query projection and its latent up-projection into one matrix."""
    if w_q.shape[1] != w_up.shape[0]:
        raise ShapeMismatch(f"absorb_weights: {w_q.shape} @ {w_up.shape}")
    return (w_q @ w_up).astype(np.float32)


def sequence_segments(seq_len: int, n_blocks: int) -> list[tuple[int, int]]:
    """Contiguous ceil(S/N) segments; the tail may be short or empty."""
    if seq_len == 0:
        return [(0, 0)] * n_blocks
    seg = -(-seq_len // n_blocks)
    return [(min(b * seg, seq_len), min((b + 1) * seg, seq_len)) for b in range(n_blocks)]


def validate_partitioning(scenario: DecodeScenario, kind: str, append_new_token: bool = True) -> None:
    """Reject dimension/cluster combinations the dataflow cannot partition."""
    n = scenario.cluster.n_blocks
    d = scenario.dims
    if kind not in DATAFLOW_KINDS:
        raise DimensionError(f"unknown dataflow kind {kind!r}")
    if d.seq_len == 0 and not append_new_token:
        raise DimensionError("no attended positions: empty cache and no appended token")
    if d.head_dim % n != 0:
        raise DimensionError(f"head_dim {d.head_dim} not divisible by cluster size {n}")
    if kind in (SPLIT_TOKEN, FUSED_MLA) and d.hidden_dim % n != 0:
        raise DimensionError(f"hidden_dim {d.hidden_dim} not divisible by cluster size {n}")
    if kind == FUSED_MLA:
        if scenario.kind != MLA:
            raise DimensionError("fused_mla requires an mla scenario")
        if d.kv_lora_rank is None or d.kv_lora_rank % n != 0:
            raise DimensionError(
                f"kv_lora_rank {d.kv_lora_rank} not divisible by cluster size {n}"
            )
    elif scenario.kind != MHA:
        raise DimensionError(f"{kind} requires an mha scenario")


class _Run:
    """Per-run bookkeeping: one reusable cluster, stage tallies, stats."""

    def __init__(self, scenario: DecodeScenario):
        scenario.validate()
        self.scenario = scenario
        self.dims = scenario.dims
        self.cluster: ClusterState = build_cluster(scenario.cluster)
        self.cluster.global_mem.alloc("output", (self.dims.batch_size, self.dims.hidden_dim))
        self.stage_traffic: dict[str, int] = {}
        self.collectives: list[StageTrace] = []
        self.score_max = np.zeros((self.dims.n_heads, self.dims.batch_size), dtype=np.float32)
        self.score_sum = np.zeros((self.dims.n_heads, self.dims.batch_size), dtype=np.float32)

    def reduce(self, name: str, op, stage: str, head: int) -> None:
        self._tally(stage, head, coll.cluster_reduce(self.cluster, name, op))

    def gather(self, name: str, segment_elems: int, stage: str, head: int) -> None:
        _, trace = coll.cluster_gather(self.cluster, name, segment_elems)
        self._tally(stage, head, trace)

    def _tally(self, stage: str, head: int, trace: coll.CollectiveTrace) -> None:
        self.stage_traffic[stage] = self.stage_traffic.get(stage, 0) + trace.dsmem_bytes
        self.collectives.append(StageTrace(stage, head, trace))

    def canonical_segments(self, block, name: str, segment_elems: int) -> np.ndarray:
        flat = coll.canonicalize_gathered(
            block.read(name), block.rank, self.cluster.n_blocks, segment_elems
        )
        return flat.reshape(self.cluster.n_blocks, -1)

    def finish(self) -> DecodeResult:
        output = np.array(self.cluster.global_mem.read("output"), dtype=np.float32)
        if not np.all(np.isfinite(output)):
            raise SimulationError("decode produced a non-finite output")
        return DecodeResult(
            output=output,
            ledger=self.cluster.ledger,
            stage_traffic=self.stage_traffic,
            score_max=self.score_max,
            score_sum=self.score_sum,
            collectives=self.collectives,
            n_clusters=self.dims.n_heads,
            n_blocks=self.cluster.n_blocks,
        )


def _reduce_softmax_stats(run: _Run, head: int, locals_m, locals_l, stats_mode: str):
    """Merge per-block (max, sum) statistics; returns (m_star, l_star).

    ``two_pass`` reduces the max first, has each block rescale its local sum
    by exp(m_local - m_star), then reduces the sums. ``merged`` performs one
    pair reduction with the softmax-merge operator. Both orders agree up to
    float re-association.
    """
    cluster = run.cluster
    batch = run.dims.batch_size
    if stats_mode == TWO_PASS:
        cluster.alloc_all("smax", (batch,))
        for block in cluster.blocks:
            block.store("smax", locals_m[block.rank])
        run.reduce("smax", coll.MAX, "stats_max_reduce", head)
        m_star = cluster.blocks[0].read("smax").copy()

        cluster.alloc_all("ssum", (batch,))
        for block in cluster.blocks:
            m_loc = locals_m[block.rank]
            scale = np.where(np.isneginf(m_loc), np.float32(0.0), np.exp(m_loc - m_star))
            block.store("ssum", locals_l[block.rank] * scale)
        run.reduce("ssum", coll.SUM, "stats_sum_reduce", head)
        l_star = cluster.blocks[0].read("ssum").copy()
        cluster.free_all("smax")
        cluster.free_all("ssum")
    elif stats_mode == MERGED:
        cluster.alloc_all("stats", (2 * batch,))
        for block in cluster.blocks:
            block.store(
                "stats", np.concatenate([locals_m[block.rank], locals_l[block.rank]])
            )
        run.reduce("stats", coll.SOFTMAX_MERGE, "stats_merge_reduce", head)
        merged = cluster.blocks[0].read("stats")
        m_star, l_star = merged[:batch].copy(), merged[batch:].copy()
        cluster.free_all("stats")
    else:
        raise ValueError(f"unknown stats_mode {stats_mode!r}")
    run.score_max[head] = m_star
    run.score_sum[head] = l_star
    return m_star, l_star


def _rescale_attention(block, name: str, m_loc, m_star, l_star) -> None:
    scale = np.where(np.isneginf(m_loc), np.float32(0.0), np.exp(m_loc - m_star)) / l_star
    block.store(name, block.read(name) * scale[:, None])


def run_fused_mha_decode(
    scenario: DecodeScenario,
    stats_mode: str = TWO_PASS,
    append_new_token: bool = True,
) -> DecodeResult:
    """Execute the split_token MHA dataflow and return output plus ledger."""
    validate_partitioning(scenario, SPLIT_TOKEN, append_new_token)
    run = _Run(scenario)
    cluster = run.cluster
    d = run.dims
    n = cluster.n_blocks
    batch, head_dim, hidden_dim = d.batch_size, d.head_dim, d.hidden_dim
    h_slice = head_dim // n
    out_slice = hidden_dim // n
    bounds = sequence_segments(d.seq_len, n)

    for head in range(d.n_heads):
        w = scenario.w_qkv[head]  # (D, 3H)

        # QKV projection: each block computes its head-dimension slice from
        # the full hidden states, then the slices are all-gathered.
        cluster.alloc_all("qkv", (n, batch, 3 * h_slice))
        for block in cluster.blocks:
            lo, hi = block.rank * h_slice, (block.rank + 1) * h_slice
            segment = np.concatenate(
                [
                    scenario.hidden @ w[:, lo:hi],
                    scenario.hidden @ w[:, head_dim + lo : head_dim + hi],
                    scenario.hidden @ w[:, 2 * head_dim + lo : 2 * head_dim + hi],
                ],
                axis=1,
            )
            block.buffer("qkv").store_flat(0, segment)
        run.gather("qkv", batch * 3 * h_slice, "qkv_gather", head)

        full_qkv = {}
        for block in cluster.blocks:
            segs = run.canonical_segments(block, "qkv", batch * 3 * h_slice)
            parts = segs.reshape(n, batch, 3 * h_slice)
            full_qkv[block.rank] = (
                np.concatenate([parts[r][:, :h_slice] for r in range(n)], axis=1),
                np.concatenate([parts[r][:, h_slice : 2 * h_slice] for r in range(n)], axis=1),
                np.concatenate([parts[r][:, 2 * h_slice :] for r in range(n)], axis=1),
            )
        cluster.free_all("qkv")

        # Attention over disjoint cache segments; the new token's K/V rows
        # join the final segment's owner only.
        cluster.alloc_all("attn_out", (batch, head_dim))
        locals_m, locals_l = {}, {}
        for block in cluster.blocks:
            q_full, k_new, v_new = full_qkv[block.rank]
            lo, hi = bounds[block.rank]
            k_seg = scenario.k_cache[head][lo:hi]
            v_seg = scenario.v_cache[head][lo:hi]
            if append_new_token and block.rank == n - 1:
                k_seg = np.concatenate([k_seg, k_new], axis=0)
                v_seg = np.concatenate([v_seg, v_new], axis=0)
            a_part, m_loc, l_loc = partial_flash_attention(q_full, k_seg, v_seg)
            block.store("attn_out", a_part)
            locals_m[block.rank], locals_l[block.rank] = m_loc, l_loc

        m_star, l_star = _reduce_softmax_stats(run, head, locals_m, locals_l, stats_mode)
        for block in cluster.blocks:
            _rescale_attention(block, "attn_out", locals_m[block.rank], m_star, l_star)
        run.reduce("attn_out", coll.SUM, "attn_out_reduce", head)

        # Output projection: every block owns a contiguous column slice.
        for block in cluster.blocks:
            attended = block.read("attn_out")
            lo = block.rank * out_slice
            projected = attended @ scenario.w_out[head][:, lo : lo + out_slice]
            for row in range(batch):
                cluster.atomic_accumulate(
                    "output", row * hidden_dim + lo, projected[row], src_rank=block.rank
                )
        cluster.free_all("attn_out")

    return run.finish()


def run_fused_mla_decode(
    scenario: DecodeScenario,
    stats_mode: str = TWO_PASS,
    append_new_token: bool = True,
) -> DecodeResult:
    """Execute the fused latent-attention dataflow."""
    validate_partitioning(scenario, FUSED_MLA, append_new_token)
    run = _Run(scenario)
    cluster = run.cluster
    d = run.dims
    n = cluster.n_blocks
    batch, head_dim, hidden_dim = d.batch_size, d.head_dim, d.hidden_dim
    rank_dim = d.kv_lora_rank
    h_slice = head_dim // n
    rank_slice = rank_dim // n
    out_slice = hidden_dim // n
    bounds = sequence_segments(d.seq_len, n)

    for head in range(d.n_heads):
        # Query projection slices, gathered to the full per-head query.
        cluster.alloc_all("q_proj", (n, batch, h_slice))
        for block in cluster.blocks:
            lo = block.rank * h_slice
            block.buffer("q_proj").store_flat(
                0, scenario.hidden @ scenario.w_q[head][:, lo : lo + h_slice]
            )
        run.gather("q_proj", batch * h_slice, "q_proj_gather", head)
        q_full = {
            block.rank: run.canonical_segments(block, "q_proj", batch * h_slice)
            .reshape(n, batch, h_slice)
            .transpose(1, 0, 2)
            .reshape(batch, head_dim)
            for block in cluster.blocks
        }
        cluster.free_all("q_proj")

        # Latent down-projection slices for the new token, gathered so the
        # final segment's owner can append complete latent rows.
        cluster.alloc_all("latent_kv", (n, batch, rank_slice))
        for block in cluster.blocks:
            lo = block.rank * rank_slice
            block.buffer("latent_kv").store_flat(
                0, scenario.hidden @ scenario.w_kv[:, lo : lo + rank_slice]
            )
        run.gather("latent_kv", batch * rank_slice, "latent_kv_gather", head)
        latent_new = {
            block.rank: run.canonical_segments(block, "latent_kv", batch * rank_slice)
            .reshape(n, batch, rank_slice)
            .transpose(1, 0, 2)
            .reshape(batch, rank_dim)
            for block in cluster.blocks
        }
        cluster.free_all("latent_kv")

        # Query-to-latent projection, sliced over the latent dimension and
        # gathered into the full latent-space query.
        cluster.alloc_all("q_latent", (n, batch, rank_slice))
        for block in cluster.blocks:
            lo = block.rank * rank_slice
            block.buffer("q_latent").store_flat(
                0, q_full[block.rank] @ scenario.w_up[head][:, lo : lo + rank_slice]
            )
        run.gather("q_latent", batch * rank_slice, "absorbed_q_gather", head)
        q_latent = {
            block.rank: run.canonical_segments(block, "q_latent", batch * rank_slice)
            .reshape(n, batch, rank_slice)
            .transpose(1, 0, 2)
            .reshape(batch, rank_dim)
            for block in cluster.blocks
        }
        cluster.free_all("q_latent")

        # Attention over latent cache segments; the latent rows serve as both
        # keys and values.
        cluster.alloc_all("attn_out", (batch, rank_dim))
        locals_m, locals_l = {}, {}
        for block in cluster.blocks:
            lo, hi = bounds[block.rank]
            seg = scenario.kv_cache[lo:hi]
            if append_new_token and block.rank == n - 1:
                seg = np.concatenate([seg, latent_new[block.rank]], axis=0)
            a_part, m_loc, l_loc = partial_flash_attention(q_latent[block.rank], seg, seg)
            block.store("attn_out", a_part)
            locals_m[block.rank], locals_l[block.rank] = m_loc, l_loc

        m_star, l_star = _reduce_softmax_stats(run, head, locals_m, locals_l, stats_mode)
        for block in cluster.blocks:
            _rescale_attention(block, "attn_out", locals_m[block.rank], m_star, l_star)
        run.reduce("attn_out", coll.SUM, "attn_out_reduce", head)

        # Latent-to-head projection, partitioned over the latent (contraction)
        # dimension, so the partial products sum-reduce to the head output.
        cluster.alloc_all("down_out", (batch, head_dim))
        for block in cluster.blocks:
            z = block.read("attn_out")
            lo = block.rank * rank_slice
            block.store(
                "down_out",
                z[:, lo : lo + rank_slice] @ scenario.w_down[head][lo : lo + rank_slice, :],
            )
        run.reduce("down_out", coll.SUM, "down_proj_reduce", head)

        for block in cluster.blocks:
            head_out = block.read("down_out")
            lo = block.rank * out_slice
            projected = head_out @ scenario.w_out[head][:, lo : lo + out_slice]
            for row in range(batch):
                cluster.atomic_accumulate(
                    "output", row * hidden_dim + lo, projected[row], src_rank=block.rank
                )
        cluster.free_all("attn_out")
        cluster.free_all("down_out")

    return run.finish()


def run_splithead_decode(
    scenario: DecodeScenario,
    append_new_token: bool = True,
) -> DecodeResult:
    """Execute the split_head dataflow (head-dimension partition throughout).

    Partial scores are contracted over each block's head-dimension slice and
    sum-reduced across the cluster before the softmax, which every block then
    computes redundantly on the complete score matrix.
    """
    validate_partitioning(scenario, SPLIT_HEAD, append_new_token)
    run = _Run(scenario)
    cluster = run.cluster
    d = run.dims
    n = cluster.n_blocks
    batch, head_dim, hidden_dim = d.batch_size, d.head_dim, d.hidden_dim
    h_slice = head_dim // n
    scale = 1.0 / math.sqrt(head_dim)
    attended_len = d.seq_len + (batch if append_new_token else 0)

    for head in range(d.n_heads):
        w = scenario.w_qkv[head]

        # Per-block K/V column slices over the full sequence, plus this
        # block's slice of the new token's rows: the positions match across
        # blocks, so the score reduction reassembles full dot products.
        slices = {}
        for block in cluster.blocks:
            lo, hi = block.rank * h_slice, (block.rank + 1) * h_slice
            q_b = scenario.hidden @ w[:, lo:hi]
            k_b = scenario.hidden @ w[:, head_dim + lo : head_dim + hi]
            v_b = scenario.hidden @ w[:, 2 * head_dim + lo : 2 * head_dim + hi]
            k_slice = scenario.k_cache[head][:, lo:hi]
            v_slice = scenario.v_cache[head][:, lo:hi]
            if append_new_token:
                k_slice = np.concatenate([k_slice, k_b], axis=0)
                v_slice = np.concatenate([v_slice, v_b], axis=0)
            slices[block.rank] = (q_b, k_slice, v_slice)

        cluster.alloc_all("scores", (batch, attended_len))
        for block in cluster.blocks:
            q_b, k_slice, _ = slices[block.rank]
            block.store("scores", (q_b @ k_slice.T) * scale)
        run.reduce("scores", coll.SUM, "score_reduce", head)

        cluster.alloc_all("out_proj", (batch, hidden_dim))
        for block in cluster.blocks:
            scores = block.read("scores")
            m_star = scores.max(axis=1)
            weights = np.exp(scores - m_star[:, None])
            l_star = weights.sum(axis=1)
            probs = weights / l_star[:, None]
            _, _, v_slice = slices[block.rank]
            attended = probs @ v_slice  # (B, h_slice)
            lo = block.rank * h_slice
            block.store("out_proj", attended @ scenario.w_out[head][lo : lo + h_slice, :])
            if block.rank == 0:
                run.score_max[head] = m_star
                run.score_sum[head] = l_star
        cluster.free_all("scores")

        run.reduce("out_proj", coll.SUM, "out_proj_reduce", head)

        # All blocks hold the complete head output; rank 0 writes it once.
        block0 = cluster.blocks[0]
        head_out = block0.read("out_proj")
        for row in range(batch):
            cluster.atomic_accumulate("output", row * hidden_dim, head_out[row], src_rank=0)
        cluster.free_all("out_proj")

    return run.finish()


def run_dataflow(kind: str, scenario: DecodeScenario, **kwargs) -> DecodeResult:
    """Dispatch by dataflow kind (split_token, fused_mla, split_head)."""
    if kind == SPLIT_TOKEN:
        return run_fused_mha_decode(scenario, **kwargs)
    if kind == FUSED_MLA:
        return run_fused_mla_decode(scenario, **kwargs)
    if kind == SPLIT_HEAD:
        kwargs.pop("stats_mode", None)
        return run_splithead_decode(scenario, **kwargs)
    raise DimensionError(f"unknown dataflow kind {kind!r}")
