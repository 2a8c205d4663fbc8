import numpy as np
import pytest

from clusterdec.errors import (
    BufferError,
    InvalidClusterSize,
    OutOfBounds,
    ShapeMismatch,
    SmemOverflow,
)
from clusterdec.simcore import (
    ClusterConfig,
    GlobalMemory,
    Tensor,
    TrafficLedger,
    atomic_accumulate,
    build_cluster,
    quantize,
)


class TestClusterConstruction:
    def test_ranks_and_empty_state(self):
        cluster = build_cluster(ClusterConfig(4))
        assert [b.rank for b in cluster.blocks] == [0, 1, 2, 3]
        assert len(cluster.ledger) == 0
        assert cluster.global_mem.tensors == {}
        assert all(b.buffers == {} for b in cluster.blocks)

    @pytest.mark.parametrize("n", [0, 3, 5, 6, 12, 32])
    def test_rejects_non_power_of_two(self, n):
        with pytest.raises(InvalidClusterSize):
            ClusterConfig(n)

    @pytest.mark.parametrize("n", [1, 2, 4, 8, 16])
    def test_accepts_powers_of_two(self, n):
        assert build_cluster(ClusterConfig(n)).n_blocks == n

    def test_smem_capacity_enforced(self):
        cap = 228 * 1024
        cluster = build_cluster(ClusterConfig(16, smem_capacity_bytes=cap))
        # Exactly at the cap is fine...
        cluster.blocks[0].alloc("big", (cap // 4,))
        # ...one element more is not.
        with pytest.raises(SmemOverflow):
            cluster.blocks[1].alloc("bigger", (229 * 1024 // 4,))

    def test_smem_capacity_counts_existing_buffers(self):
        cluster = build_cluster(ClusterConfig(2, smem_capacity_bytes=64))
        block = cluster.blocks[0]
        block.alloc("a", (8,))  # 32 bytes
        block.alloc("b", (8,))  # fills the cap
        with pytest.raises(SmemOverflow):
            block.alloc("c", (1,))


class TestTensor:
    def test_f16_emulated_rounds_stores(self):
        t = Tensor(np.array([1 / 3], dtype=np.float32), "f16-emulated")
        expected = np.float32(np.float16(1 / 3))
        assert t.read()[0] == expected
        assert t.read()[0] != np.float32(1 / 3)

    def test_f32_keeps_values(self):
        t = Tensor(np.array([1 / 3], dtype=np.float32))
        assert t.read()[0] == np.float32(1 / 3)

    def test_read_view_is_immutable(self):
        t = Tensor.zeros((3,))
        with pytest.raises(ValueError):
            t.read()[0] = 1.0

    def test_store_shape_checked(self):
        t = Tensor.zeros((2, 2))
        with pytest.raises(ShapeMismatch):
            t.store(np.zeros(3, dtype=np.float32))

    def test_quantize_roundtrip_idempotent(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(100).astype(np.float32)
        once = quantize(x, "f16-emulated")
        assert np.array_equal(once, quantize(once, "f16-emulated"))


class TestAtomicAccumulate:
    def test_add_to_zero(self):
        gmem = GlobalMemory()
        gmem.alloc("out", (4,))
        atomic_accumulate(gmem, "out", 0, np.array([1.0, 2.0], dtype=np.float32))
        assert gmem.read("out").tolist() == [1.0, 2.0, 0.0, 0.0]

    def test_two_adds_commute(self):
        gmem = GlobalMemory()
        gmem.alloc("out", (1,))
        atomic_accumulate(gmem, "out", 0, np.array([1.0], dtype=np.float32))
        atomic_accumulate(gmem, "out", 0, np.array([1.0], dtype=np.float32))
        assert gmem.read("out")[0] == 2.0
        assert gmem.atomic_add_count == 2

    def test_disjoint_column_slices_match_dense_product(self):
        # Four blocks each project a quarter of the output columns; the
        # accumulated result must equal the single dense product.
        rng = np.random.default_rng(42)
        a = rng.standard_normal((3, 8)).astype(np.float32)
        w = rng.standard_normal((8, 16)).astype(np.float32)
        cluster = build_cluster(ClusterConfig(4))
        cluster.global_mem.alloc("out", (3, 16))
        for block in cluster.blocks:
            lo = block.rank * 4
            partial = a @ w[:, lo : lo + 4]
            for row in range(3):
                cluster.atomic_accumulate("out", row * 16 + lo, partial[row], block.rank)
        np.testing.assert_allclose(cluster.global_mem.read("out"), a @ w, atol=1e-6)
        assert cluster.global_mem.atomic_add_count == 12

    def test_out_of_bounds_rejected(self):
        gmem = GlobalMemory()
        gmem.alloc("out", (2,))
        with pytest.raises(OutOfBounds):
            atomic_accumulate(gmem, "out", 1, np.array([1.0, 1.0], dtype=np.float32))

    def test_missing_tensor_rejected(self):
        with pytest.raises(BufferError):
            atomic_accumulate(GlobalMemory(), "nope", 0, np.array([1.0], dtype=np.float32))

    def test_ledger_records_global_channel(self):
        cluster = build_cluster(ClusterConfig(2))
        cluster.global_mem.alloc("out", (4,))
        cluster.atomic_accumulate("out", 0, np.ones(2, dtype=np.float32), src_rank=1)
        (event,) = cluster.ledger.events
        assert event.channel == "global"
        assert event.nbytes == 8
        assert event.src_rank == 1


class TestTrafficLedger:
    def test_rejects_non_positive_bytes(self):
        ledger = TrafficLedger()
        with pytest.raises(ValueError):
            ledger.record(0, 0, 1, 0, "dsmem")

    def test_rejects_unknown_channel(self):
        ledger = TrafficLedger()
        with pytest.raises(ValueError):
            ledger.record(0, 0, 1, 4, "smoke")

    def test_mark_and_bytes_since(self):
        ledger = TrafficLedger()
        ledger.record(0, 0, 1, 10, "dsmem")
        mark = ledger.mark()
        ledger.record(0, 1, 0, 20, "dsmem")
        ledger.record(-1, 0, -1, 99, "global")
        assert ledger.bytes_since(mark) == 20
        assert ledger.channel_bytes("dsmem") == 30
        assert ledger.channel_bytes("global") == 99

    def test_buffer_errors(self):
        cluster = build_cluster(ClusterConfig(1))
        block = cluster.blocks[0]
        block.alloc("x", (2,))
        with pytest.raises(BufferError):
            block.alloc("x", (2,))
        with pytest.raises(BufferError):
            block.free("y")
        with pytest.raises(BufferError):
            block.read("y")
