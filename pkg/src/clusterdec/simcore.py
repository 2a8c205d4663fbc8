"""Simulated thread-block cluster with byte-accurate communication accounting.

A cluster is N = 2^k blocks (k <= 4), each holding named shared-memory
buffers. Blocks exchange data only through the collective primitives in
:mod:`clusterdec.collectives`; every inter-block transfer lands in the
cluster's :class:`TrafficLedger` as exactly one event. Global memory supports
atomic accumulation for cross-cluster output assembly.

Execution is logical and deterministic: per-block stages run in rank order,
collectives advance in lockstep rounds, and nothing is timed. All arithmetic
is float32; the ``f16-emulated`` storage mode rounds every buffer store to
the nearest half-precision value while keeping float32 compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BufferError,
    InvalidClusterSize,
    OutOfBounds,
    ShapeMismatch,
    SmemOverflow,
)

MAX_CLUSTER_BLOCKS = 16

F32 = "f32"
F16_EMULATED = "f16-emulated"

_TAG_BYTES = {F32: 4, F16_EMULATED: 2}


def dtype_tag_for_bytes(nbytes: int) -> str:
    if nbytes == 4:
        return F32
    if nbytes == 2:
        return F16_EMULATED
    raise ValueError(f"dtype_bytes must be 2 or 4, got {nbytes}")


def quantize(values: np.ndarray, dtype_tag: str) -> np.ndarray:
    """Apply the storage rounding for ``dtype_tag`` (float32 compute is kept)."""
    arr = np.asarray(values, dtype=np.float32)
    if dtype_tag == F16_EMULATED:
        return arr.astype(np.float16).astype(np.float32)
    if dtype_tag == F32:
        return arr
    raise ValueError(f"unknown dtype_tag {dtype_tag!r}")


class Tensor:
    """Dense row-major float32 array with an explicit storage-rounding mode.

    ``store`` is the only write path; it rounds to the nearest representable
    value of the storage dtype. ``read`` returns a non-writeable view so that
    simulated memories cannot be mutated behind the ledger's back.
    """

    __slots__ = ("_data", "dtype_tag")

    def __init__(self, array: np.ndarray, dtype_tag: str = F32):
        self._data = np.ascontiguousarray(quantize(array, dtype_tag))
        self.dtype_tag = dtype_tag

    @classmethod
    def zeros(cls, shape, dtype_tag: str = F32) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32), dtype_tag)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype_bytes(self) -> int:
        return _TAG_BYTES[self.dtype_tag]

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype_bytes

    def read(self) -> np.ndarray:
        view = self._data.view()
        view.flags.writeable = False
        return view

    def store(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32)
        if values.shape != self._data.shape:
            raise ShapeMismatch(
                f"store of shape {values.shape} into buffer of shape {self._data.shape}"
            )
        self._data[...] = quantize(values, self.dtype_tag)

    def store_flat(self, offset: int, values: np.ndarray) -> None:
        """Overwrite a flat slice [offset, offset+len) with rounding."""
        values = np.asarray(values, dtype=np.float32).ravel()
        flat = self._data.reshape(-1)
        if offset < 0 or offset + values.size > flat.size:
            raise OutOfBounds(
                f"flat store [{offset}, {offset + values.size}) exceeds size {flat.size}"
            )
        flat[offset : offset + values.size] = quantize(values, self.dtype_tag)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype_tag={self.dtype_tag!r})"


@dataclass(frozen=True)
class ClusterConfig:
    """Static cluster parameters.

    ``dtype_bytes`` sets both the ledger's byte accounting and the storage
    rounding mode (2 -> f16-emulated, 4 -> f32). ``smem_capacity_bytes`` of
    ``None`` means unlimited per-block shared memory.
    """

    n_blocks: int
    smem_capacity_bytes: int | None = None
    dtype_bytes: int = 4

    def __post_init__(self):
        n = self.n_blocks
        if n < 1 or n > MAX_CLUSTER_BLOCKS or (n & (n - 1)) != 0:
            raise InvalidClusterSize(
                f"cluster size must be a power of two in [1, {MAX_CLUSTER_BLOCKS}], got {n}"
            )
        dtype_tag_for_bytes(self.dtype_bytes)
        if self.smem_capacity_bytes is not None and self.smem_capacity_bytes <= 0:
            raise ValueError("smem_capacity_bytes must be positive or None")

    @property
    def dtype_tag(self) -> str:
        return dtype_tag_for_bytes(self.dtype_bytes)


@dataclass(frozen=True)
class TrafficEvent:
    """One recorded data movement.

    ``round`` is the 0-based round index within a collective for the dsmem
    channel, and -1 for global-memory accumulation events. ``dst_rank`` is -1
    when the destination is global memory.
    """

    round: int
    src_rank: int
    dst_rank: int
    nbytes: int
    channel: str  # "dsmem" or "global"


class TrafficLedger:
    """Ordered record of every simulated data movement."""

    def __init__(self):
        self.events: list[TrafficEvent] = []

    def record(self, round: int, src_rank: int, dst_rank: int, nbytes: int, channel: str) -> None:
        if nbytes <= 0:
            raise ValueError("ledger events must move a positive number of bytes")
        if channel not in ("dsmem", "global"):
            raise ValueError(f"unknown channel {channel!r}")
        self.events.append(TrafficEvent(round, src_rank, dst_rank, nbytes, channel))

    def mark(self) -> int:
        """Current event count; use with :meth:`bytes_since` to scope a stage."""
        return len(self.events)

    def bytes_since(self, mark: int, channel: str = "dsmem") -> int:
        return sum(e.nbytes for e in self.events[mark:] if e.channel == channel)

    def channel_bytes(self, channel: str = "dsmem") -> int:
        return sum(e.nbytes for e in self.events if e.channel == channel)

    def __len__(self) -> int:
        return len(self.events)


class GlobalMemory:
    """Named tensors reachable by every block, with atomic accumulation."""

    def __init__(self, dtype_tag: str = F32):
        self.dtype_tag = dtype_tag
        self.tensors: dict[str, Tensor] = {}
        self.atomic_add_count = 0

    def alloc(self, name: str, shape) -> Tensor:
        if name in self.tensors:
            raise BufferError(f"global tensor {name!r} already exists")
        tensor = Tensor.zeros(shape, self.dtype_tag)
        self.tensors[name] = tensor
        return tensor

    def put(self, name: str, values: np.ndarray) -> Tensor:
        tensor = Tensor(values, self.dtype_tag)
        self.tensors[name] = tensor
        return tensor

    def read(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise BufferError(f"global tensor {name!r} does not exist")
        return self.tensors[name].read()


def atomic_accumulate(global_mem: GlobalMemory, name: str, offset: int, values: np.ndarray) -> None:
    """target[offset + i] += values[i] for all i, as one atomic event.

    The accumulation is performed in float32 and re-rounded per the storage
    dtype, which models atomics on half-precision outputs.
    """
    if name not in global_mem.tensors:
        raise BufferError(f"global tensor {name!r} does not exist")
    target = global_mem.tensors[name]
    values = np.asarray(values, dtype=np.float32).ravel()
    flat = target.read().reshape(-1)
    if offset < 0 or offset + values.size > flat.size:
        raise OutOfBounds(
            f"atomic accumulate [{offset}, {offset + values.size}) exceeds size {flat.size}"
        )
    target.store_flat(offset, flat[offset : offset + values.size] + values)
    global_mem.atomic_add_count += 1


@dataclass
class BlockState:
    """One simulated thread block: a rank plus named shared-memory buffers."""

    rank: int
    dtype_tag: str
    smem_capacity_bytes: int | None = None
    buffers: dict[str, Tensor] = field(default_factory=dict)

    @property
    def allocated_bytes(self) -> int:
        return sum(t.nbytes for t in self.buffers.values())

    def alloc(self, name: str, shape) -> Tensor:
        if name in self.buffers:
            raise BufferError(f"block {self.rank}: buffer {name!r} already allocated")
        tensor = Tensor.zeros(shape, self.dtype_tag)
        if (
            self.smem_capacity_bytes is not None
            and self.allocated_bytes + tensor.nbytes > self.smem_capacity_bytes
        ):
            raise SmemOverflow(
                f"block {self.rank}: allocating {tensor.nbytes} B for {name!r} exceeds "
                f"capacity {self.smem_capacity_bytes} B "
                f"(already allocated {self.allocated_bytes} B)"
            )
        self.buffers[name] = tensor
        return tensor

    def free(self, name: str) -> None:
        if name not in self.buffers:
            raise BufferError(f"block {self.rank}: buffer {name!r} not allocated")
        del self.buffers[name]

    def buffer(self, name: str) -> Tensor:
        if name not in self.buffers:
            raise BufferError(f"block {self.rank}: buffer {name!r} not allocated")
        return self.buffers[name]

    def read(self, name: str) -> np.ndarray:
        return self.buffer(name).read()

    def store(self, name: str, values: np.ndarray) -> None:
        self.buffer(name).store(values)


class ClusterState:
    """N blocks plus their shared traffic ledger and global memory."""

    def __init__(self, config: ClusterConfig):
        self.config = config
        self.blocks = [
            BlockState(rank, config.dtype_tag, config.smem_capacity_bytes)
            for rank in range(config.n_blocks)
        ]
        self.ledger = TrafficLedger()
        self.global_mem = GlobalMemory(config.dtype_tag)

    @property
    def n_blocks(self) -> int:
        return self.config.n_blocks

    @property
    def dtype_bytes(self) -> int:
        return self.config.dtype_bytes

    def alloc_all(self, name: str, shape) -> None:
        """Allocate a same-shaped buffer on every block."""
        for block in self.blocks:
            block.alloc(name, shape)

    def free_all(self, name: str) -> None:
        for block in self.blocks:
            block.free(name)

    def for_each_block(self, fn) -> None:
        """Run one per-block stage in rank order (deterministic lockstep)."""
        for block in self.blocks:
            fn(block)

    def atomic_accumulate(self, name: str, offset: int, values: np.ndarray, src_rank: int) -> None:
        """Atomic accumulation into global memory, recorded on the ledger."""
        values = np.asarray(values, dtype=np.float32)
        atomic_accumulate(self.global_mem, name, offset, values)
        self.ledger.record(-1, src_rank, -1, values.size * self.dtype_bytes, "global")


def build_cluster(config: ClusterConfig) -> ClusterState:
    """Construct a cluster with empty buffers, ledger, and global memory."""
    return ClusterState(config)
