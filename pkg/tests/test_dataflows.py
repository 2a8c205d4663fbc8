import math

import numpy as np
import pytest

from clusterdec.analysis import reconcile_traffic, traffic_gather, traffic_reduce
from clusterdec.dataflows import (
    DATAFLOW_KINDS,
    FUSED_MLA,
    SPLIT_HEAD,
    SPLIT_TOKEN,
    absorb_weights,
    partial_flash_attention,
    run_dataflow,
    run_fused_mha_decode,
    run_fused_mla_decode,
    run_splithead_decode,
    sequence_segments,
)
from clusterdec.errors import DimensionError, ShapeMismatch
from clusterdec.oracle import dense_mha_decode, dense_mla_decode, naive_matmul, softmax
from clusterdec.scenarios import (
    ModelDims,
    random_mha_scenario,
    random_mla_scenario,
    with_preappended_cache,
)

from helpers import max_abs_err, random_scenario


def oracle_for(kind, scenario):
    if kind == FUSED_MLA:
        return dense_mla_decode(scenario, "absorbed")
    return dense_mha_decode(scenario)


class TestPartialFlashAttention:
    def test_single_key_equal_to_query(self):
        q = np.array([[1.0, 2.0, 2.0, 1.0]], dtype=np.float32)
        v = np.array([[5.0, -3.0, 0.5, 2.0]], dtype=np.float32)
        a, m, l = partial_flash_attention(q, q.copy(), v)
        expected_max = float((q @ q.T)[0, 0]) / math.sqrt(4)
        assert m[0] == pytest.approx(expected_max)
        assert l[0] == pytest.approx(1.0)
        np.testing.assert_allclose(a, v, atol=1e-6)

    def test_empty_segment_returns_merge_identity(self):
        q = np.zeros((3, 4), dtype=np.float32)
        a, m, l = partial_flash_attention(
            q, np.zeros((0, 4), dtype=np.float32), np.zeros((0, 4), dtype=np.float32)
        )
        assert np.all(a == 0.0)
        assert np.all(np.isneginf(m))
        assert np.all(l == 0.0)

    def test_two_segments_merge_to_dense_attention(self):
        rng = np.random.default_rng(14)
        q = rng.standard_normal((2, 8)).astype(np.float32)
        k = rng.standard_normal((14, 8)).astype(np.float32)
        v = rng.standard_normal((14, 8)).astype(np.float32)

        parts = [partial_flash_attention(q, k[:7], v[:7]), partial_flash_attention(q, k[7:], v[7:])]
        m_star = np.maximum(parts[0][1], parts[1][1])
        l_star = sum(p[2] * np.exp(p[1] - m_star) for p in parts)
        merged = sum(p[0] * (np.exp(p[1] - m_star) / l_star)[:, None] for p in parts)

        dense = softmax(q @ k.T / math.sqrt(8)) @ v
        assert max_abs_err(merged, dense) <= 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            partial_flash_attention(
                np.zeros((1, 4), dtype=np.float32),
                np.zeros((3, 5), dtype=np.float32),
                np.zeros((3, 5), dtype=np.float32),
            )


class TestAbsorbWeights:
    def test_identity_up_projection(self):
        rng = np.random.default_rng(1)
        w_q = rng.standard_normal((6, 4)).astype(np.float32)
        assert np.array_equal(absorb_weights(w_q, np.eye(4, dtype=np.float32)), w_q)

    def test_hand_multiplied_2x2(self):
        w_q = np.array([[1.0, 0.0], [0.0, 2.0]], dtype=np.float32)
        w_up = np.array([[3.0, 1.0], [1.0, 0.0]], dtype=np.float32)
        assert absorb_weights(w_q, w_up).tolist() == [[3.0, 1.0], [2.0, 0.0]]

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(2)
        w_q = (rng.standard_normal((8, 4)) * 0.5).astype(np.float32)
        w_up = (rng.standard_normal((4, 6)) * 0.5).astype(np.float32)
        assert max_abs_err(absorb_weights(w_q, w_up), naive_matmul(w_q, w_up)) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            absorb_weights(np.ones((2, 3), dtype=np.float32), np.ones((2, 3), dtype=np.float32))


class TestSequenceSegments:
    def test_even_and_ragged(self):
        assert sequence_segments(8, 4) == [(0, 2), (2, 4), (4, 6), (6, 8)]
        assert sequence_segments(5, 4) == [(0, 2), (2, 4), (4, 5), (5, 5)]
        assert sequence_segments(0, 2) == [(0, 0), (0, 0)]
        assert sequence_segments(7, 1) == [(0, 7)]


class TestOracleEquivalence:
    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    @pytest.mark.parametrize("n_blocks", [1, 2, 4])
    def test_matches_dense_oracle_f32(self, kind, n_blocks):
        for seed in range(3):
            scenario = random_scenario(kind, seed=seed, n_blocks=n_blocks)
            result = run_dataflow(kind, scenario)
            assert max_abs_err(result.output, oracle_for(kind, scenario)) <= 1e-5

    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    def test_matches_dense_oracle_f16(self, kind):
        for seed in range(3):
            scenario = random_scenario(kind, seed=seed, n_blocks=4, dtype_bytes=2)
            result = run_dataflow(kind, scenario)
            assert max_abs_err(result.output, oracle_for(kind, scenario)) <= 3e-2

    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    def test_single_block_is_tight(self, kind):
        scenario = random_scenario(kind, seed=5, n_blocks=1)
        result = run_dataflow(kind, scenario)
        assert result.dsmem_bytes == 0
        assert max_abs_err(result.output, oracle_for(kind, scenario)) <= 1e-6

    def test_tiny_mha_example(self):
        dims = ModelDims(batch_size=1, hidden_dim=8, n_heads=1, head_dim=4, seq_len=2)
        scenario = random_mha_scenario(dims, n_blocks=2, seed=7)
        result = run_fused_mha_decode(scenario)
        assert max_abs_err(result.output, dense_mha_decode(scenario)) <= 1e-5

    def test_tiny_mla_example(self):
        dims = ModelDims(
            batch_size=1, hidden_dim=16, n_heads=1, head_dim=4, seq_len=3, kv_lora_rank=8
        )
        scenario = random_mla_scenario(dims, n_blocks=2, seed=7)
        result = run_fused_mla_decode(scenario)
        assert max_abs_err(result.output, dense_mla_decode(scenario, "absorbed")) <= 1e-5

    def test_tiny_splithead_example(self):
        dims = ModelDims(batch_size=1, hidden_dim=8, n_heads=1, head_dim=4, seq_len=6)
        scenario = random_mha_scenario(dims, n_blocks=2, seed=7)
        result = run_splithead_decode(scenario)
        assert max_abs_err(result.output, dense_mha_decode(scenario)) <= 1e-5


class TestNewTokenSingleCount:
    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    @pytest.mark.parametrize("n_blocks", [2, 4])
    def test_preappending_cache_is_equivalent(self, kind, n_blocks):
        scenario = random_scenario(kind, seed=21, n_blocks=n_blocks, max_seq=16)
        baseline = run_dataflow(kind, scenario)
        pre = with_preappended_cache(scenario)
        moved = run_dataflow(kind, pre, append_new_token=False)
        assert max_abs_err(baseline.output, moved.output) <= 1e-6

    def test_empty_cache_without_token_rejected(self):
        from dataclasses import replace

        scenario = random_scenario(SPLIT_TOKEN, seed=0, n_blocks=2)
        bare = replace(
            scenario,
            dims=replace(scenario.dims, seq_len=0),
            k_cache=scenario.k_cache[:, :0],
            v_cache=scenario.v_cache[:, :0],
        )
        with pytest.raises(DimensionError):
            run_fused_mha_decode(bare, append_new_token=False)


class TestStatisticReduction:
    @pytest.mark.parametrize("kind", [SPLIT_TOKEN, FUSED_MLA])
    def test_two_pass_and_merged_agree(self, kind):
        scenario = random_scenario(kind, seed=33, n_blocks=4)
        two = run_dataflow(kind, scenario, stats_mode="two_pass")
        one = run_dataflow(kind, scenario, stats_mode="merged")
        assert max_abs_err(two.score_max, one.score_max) == 0.0
        assert max_abs_err(two.score_sum, one.score_sum) <= 1e-6 * np.abs(two.score_sum).max()
        assert max_abs_err(two.output, one.output) <= 1e-6
        # Same byte volume either way: two reduces of B or one reduce of 2B.
        assert two.dsmem_bytes == one.dsmem_bytes

    def test_stats_match_dense_scores(self):
        dims = ModelDims(batch_size=2, hidden_dim=8, n_heads=1, head_dim=4, seq_len=9)
        scenario = random_mha_scenario(dims, n_blocks=2, seed=3)
        result = run_fused_mha_decode(scenario)
        w = scenario.w_qkv[0]
        q = scenario.hidden @ w[:, :4]
        k = np.concatenate([scenario.k_cache[0], scenario.hidden @ w[:, 4:8]], axis=0)
        scores = q @ k.T / 2.0
        np.testing.assert_allclose(result.score_max[0], scores.max(axis=1), atol=1e-5)
        np.testing.assert_allclose(
            result.score_sum[0],
            np.exp(scores - scores.max(axis=1)[:, None]).sum(axis=1),
            rtol=1e-5,
        )


class TestClusterSizeInvariance:
    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    def test_outputs_agree_across_cluster_sizes(self, kind):
        outputs = []
        for n_blocks in (1, 2, 4):
            scenario = random_scenario(kind, seed=10, n_blocks=n_blocks)
            outputs.append(run_dataflow(kind, scenario).output)
        for a in outputs:
            for b in outputs:
                assert max_abs_err(a, b) <= 1e-4


class TestTrafficAccounting:
    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    @pytest.mark.parametrize("n_blocks", [1, 2, 4, 8])
    def test_stage_traffic_sums_to_ledger(self, kind, n_blocks):
        scenario = random_scenario(kind, seed=2, n_blocks=n_blocks)
        result = run_dataflow(kind, scenario)
        assert sum(result.stage_traffic.values()) == result.dsmem_bytes

    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    def test_reconciles_exactly(self, kind):
        scenario = random_scenario(kind, seed=4, n_blocks=4)
        result = run_dataflow(kind, scenario)
        breakdown = reconcile_traffic(kind, result, scenario.dims)
        assert breakdown.reconciled
        for entry in breakdown.entries:
            assert entry.measured_bytes == entry.analytical_bytes

    def test_per_head_traffic_at_llama_dims(self):
        # Half-precision split_token at production dims: the gather moves
        # 3*(H/N) halves per segment, the output reduce H halves, and the
        # statistics pair rides along separately.
        dims = ModelDims(
            batch_size=1, hidden_dim=4096, n_heads=2, head_dim=128, seq_len=128, dtype_bytes=2
        )
        scenario = random_mha_scenario(dims, n_blocks=4, seed=1)
        result = run_fused_mha_decode(scenario)
        per_head_gather = result.stage_traffic["qkv_gather"] // 2
        per_head_reduce = result.stage_traffic["attn_out_reduce"] // 2
        per_head_stats = (
            result.stage_traffic["stats_max_reduce"] + result.stage_traffic["stats_sum_reduce"]
        ) // 2
        assert per_head_gather == traffic_gather(3 * (128 // 4) * 2, 4)
        assert per_head_reduce == traffic_reduce(128 * 2, 4)
        assert per_head_stats == 2 * traffic_reduce(1 * 2, 4)

    def test_round_counts_per_collective(self):
        scenario = random_scenario(FUSED_MLA, seed=6, n_blocks=8)
        result = run_dataflow(FUSED_MLA, scenario)
        assert result.collectives, "expected collective traces"
        assert all(t.trace.rounds == 3 for t in result.collectives)


class TestValidation:
    def test_head_dim_divisibility(self):
        dims = ModelDims(batch_size=1, hidden_dim=8, n_heads=1, head_dim=6, seq_len=2)
        scenario = random_mha_scenario(dims, n_blocks=4, seed=0)
        with pytest.raises(DimensionError):
            run_fused_mha_decode(scenario)

    def test_latent_rank_divisibility(self):
        dims = ModelDims(
            batch_size=1, hidden_dim=8, n_heads=1, head_dim=8, seq_len=2, kv_lora_rank=6
        )
        scenario = random_mla_scenario(dims, n_blocks=4, seed=0)
        with pytest.raises(DimensionError):
            run_fused_mla_decode(scenario)

    def test_split_head_allows_odd_hidden_dim(self):
        # Only the head dimension is partitioned in split_head.
        dims = ModelDims(batch_size=1, hidden_dim=10, n_heads=1, head_dim=8, seq_len=4)
        scenario = random_mha_scenario(dims, n_blocks=2, seed=0)
        result = run_splithead_decode(scenario)
        assert max_abs_err(result.output, dense_mha_decode(scenario)) <= 1e-5

    def test_kind_mismatch(self):
        scenario = random_scenario(SPLIT_TOKEN, seed=0, n_blocks=2)
        with pytest.raises(DimensionError):
            run_fused_mla_decode(scenario)

    def test_unknown_kind(self):
        scenario = random_scenario(SPLIT_TOKEN, seed=0, n_blocks=2)
        with pytest.raises(DimensionError):
            run_dataflow("pipelined", scenario)


class TestDeterminism:
    @pytest.mark.parametrize("kind", DATAFLOW_KINDS)
    def test_bit_identical_replay(self, kind):
        first = run_dataflow(kind, random_scenario(kind, seed=12, n_blocks=4))
        second = run_dataflow(kind, random_scenario(kind, seed=12, n_blocks=4))
        assert np.array_equal(first.output, second.output)
        assert first.ledger.events == second.ledger.events
        assert first.stage_traffic == second.stage_traffic
