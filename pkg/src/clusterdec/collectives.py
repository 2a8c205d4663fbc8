"""Cluster-level collective primitives over the simulated inter-block channel.

Both primitives use the same exponential-stride schedule: log2(N) rounds in
which block b sends to (b + stride) mod N and receives from
(b - stride) mod N, with the stride doubling each round.

* ``cluster_reduce`` keeps the message size constant and folds received data
  into the local buffer with an elementwise reduction operator, so every
  block ends with the reduction of all N initial buffers
  (size * log2(N) * N bytes of channel traffic).
* ``cluster_gather`` doubles the message size each round by forwarding the
  already-assembled prefix, so every block ends with all N segments
  (size * (N - 1) * N bytes of channel traffic). The final segment order is
  rank-rotated: segment j of block b holds rank (b - j) mod N's data. Use
  :func:`canonicalize_gathered` to recover rank order before consuming it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BufferError, ShapeMismatch
from .simcore import ClusterState

NEG_INF = np.float32(-np.inf)


def _merge_softmax_stats(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Merge two (max, sum) statistic vectors laid out as [maxes | sums].

    A running softmax over a partitioned score set is summarized by its max m
    and its sum of exp(score - m); two such summaries merge exactly:

        m' = max(m_a, m_b),  s' = s_a * exp(m_a - m') + s_b * exp(m_b - m')

    Empty partitions carry the identity (m = -inf, s = 0); the scale factor
    for a -inf max is forced to 0 to avoid exp(-inf - -inf) = nan.
    """
    if a.size % 2 != 0:
        raise ShapeMismatch("softmax_merge requires an even-length buffer ([maxes | sums])")
    half = a.size // 2
    m_a, s_a = a[:half], a[half:]
    m_b, s_b = b[:half], b[half:]
    m = np.maximum(m_a, m_b)

    def rescale(m_side: np.ndarray, s_side: np.ndarray) -> np.ndarray:
        scale = np.zeros_like(m, dtype=np.float32)
        finite = ~np.isneginf(m_side)
        scale[finite] = np.exp(m_side[finite] - m[finite])
        return s_side * scale

    return np.concatenate([m, rescale(m_a, s_a) + rescale(m_b, s_b)]).astype(np.float32)


@dataclass(frozen=True)
class ReduceOp:
    """Associative, commutative elementwise reduction operator."""

    kind: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.fn(a, b)


SUM = ReduceOp("sum", lambda a, b: a + b)
MAX = ReduceOp("max", np.maximum)
SOFTMAX_MERGE = ReduceOp("softmax_merge", _merge_softmax_stats)

REDUCE_OPS = {"sum": SUM, "max": MAX, "softmax_merge": SOFTMAX_MERGE, "softmax-merge": SOFTMAX_MERGE}


def resolve_reduce_op(op: "str | ReduceOp") -> ReduceOp:
    if isinstance(op, ReduceOp):
        return op
    try:
        return REDUCE_OPS[op]
    except KeyError:
        raise ValueError(f"unknown reduce op {op!r}; expected one of sum, max, softmax_merge")


@dataclass(frozen=True)
class GatherLayout:
    """Describes the rank rotation left in place by ``cluster_gather``."""

    n_blocks: int

    def owner_of_segment(self, rank: int, segment: int) -> int:
        return (rank - segment) % self.n_blocks


@dataclass(frozen=True)
class CollectiveTrace:
    """Byte-accurate summary of one collective invocation."""

    primitive: str  # "reduce" or "gather"
    payload_bytes: int  # buffer bytes for reduce, segment bytes for gather
    rounds: int
    dsmem_bytes: int


def ring_partners(rank: int, stride: int, n_blocks: int) -> tuple[int, int]:
    """(send_to, recv_from) for one round of the exponential-stride schedule."""
    return (rank + stride) % n_blocks, (rank - stride + n_blocks) % n_blocks


def cluster_reduce(cluster: ClusterState, buffer_name: str, op: "str | ReduceOp") -> CollectiveTrace:
    """Reduce ``buffer_name`` elementwise across all blocks, in place.

    Every block ends with the operator-fold of all N initial buffers. A
    scratch buffer of equal size is allocated for the duration of the call
    (this can raise ``SmemOverflow`` under a shared-memory cap). For N == 1
    the call is a no-op with an empty ledger contribution.
    """
    op = resolve_reduce_op(op)
    blocks = cluster.blocks
    n = cluster.n_blocks

    shape = blocks[0].buffer(buffer_name).shape
    for block in blocks:
        if block.buffer(buffer_name).shape != shape:
            raise ShapeMismatch(
                f"cluster_reduce({buffer_name!r}): block {block.rank} has shape "
                f"{block.buffer(buffer_name).shape}, expected {shape}"
            )

    payload_bytes = blocks[0].buffer(buffer_name).size * cluster.dtype_bytes
    if n == 1:
        return CollectiveTrace("reduce", payload_bytes, 0, 0)

    scratch_name = f"__scratch_{buffer_name}"
    cluster.alloc_all(scratch_name, shape)
    try:
        stride = 1
        round_idx = 0
        while stride < n:
            # Snapshot all sends before any delivery: within a round every
            # block transmits its pre-round buffer (lockstep barrier).
            outbound = [block.read(buffer_name).copy() for block in blocks]
            for block in blocks:
                send_to, _ = ring_partners(block.rank, stride, n)
                cluster.ledger.record(round_idx, block.rank, send_to, payload_bytes, "dsmem")
            for block in blocks:
                _, recv_from = ring_partners(block.rank, stride, n)
                block.store(scratch_name, outbound[recv_from])
            for block in blocks:
                merged = op(block.read(buffer_name), block.read(scratch_name))
                block.store(buffer_name, merged)
            stride *= 2
            round_idx += 1
    finally:
        cluster.free_all(scratch_name)

    return CollectiveTrace("reduce", payload_bytes, round_idx, payload_bytes * round_idx * n)


def cluster_gather(
    cluster: ClusterState, buffer_name: str, segment_elems: int
) -> tuple[GatherLayout, CollectiveTrace]:
    """All-gather ``buffer_name`` across blocks, in place.

    Each block's buffer must hold N * segment_elems elements with its local
    data in segment 0. Round r forwards the already-assembled prefix of
    2^r segments, so the exchanged volume doubles every round. Afterwards
    every block holds all N segments in the rotated order described by the
    returned :class:`GatherLayout`.
    """
    blocks = cluster.blocks
    n = cluster.n_blocks

    for block in blocks:
        size = block.buffer(buffer_name).size
        if size != n * segment_elems:
            raise BufferError(
                f"cluster_gather({buffer_name!r}): block {block.rank} buffer has "
                f"{size} elements, expected n_blocks * segment_elems = {n * segment_elems}"
            )

    segment_bytes = segment_elems * cluster.dtype_bytes
    if n == 1:
        return GatherLayout(1), CollectiveTrace("gather", segment_bytes, 0, 0)

    total_sent = 0
    stride = 1
    round_idx = 0
    while stride < n:
        span = segment_elems * stride
        message_bytes = span * cluster.dtype_bytes
        prefixes = [block.read(buffer_name).reshape(-1)[:span].copy() for block in blocks]
        for block in blocks:
            send_to, _ = ring_partners(block.rank, stride, n)
            cluster.ledger.record(round_idx, block.rank, send_to, message_bytes, "dsmem")
            total_sent += message_bytes
        for block in blocks:
            _, recv_from = ring_partners(block.rank, stride, n)
            block.buffer(buffer_name).store_flat(span, prefixes[recv_from])
        stride *= 2
        round_idx += 1

    return GatherLayout(n), CollectiveTrace("gather", segment_bytes, round_idx, total_sent)


def canonicalize_gathered(
    buffer: np.ndarray, rank: int, n_blocks: int, segment_elems: int
) -> np.ndarray:
    """Reorder a gathered buffer so segment r holds rank r's data.

    Inverts the rotation left by ``cluster_gather``: out[r] = in[(rank - r)
    mod N]. Segment 0 (the local data) is always a fixed point.
    """
    flat = np.asarray(buffer).reshape(-1)
    if flat.size != n_blocks * segment_elems:
        raise BufferError(
            f"canonicalize_gathered: buffer has {flat.size} elements, "
            f"expected {n_blocks * segment_elems}"
        )
    segments = flat.reshape(n_blocks, segment_elems)
    order = [(rank - r) % n_blocks for r in range(n_blocks)]
    return segments[order].reshape(-1).copy()
