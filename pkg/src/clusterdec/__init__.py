"""clusterdec: deterministic simulator and reference library for
cluster-centric LLM decoding dataflows.

The package simulates thread-block clusters exchanging data through two
collective primitives (an all-blocks reduce and an all-gather), executes three
fused decoding dataflows on them, verifies outputs against dense oracles, and
reconciles the byte-accurate communication ledger against an analytical
traffic model plus a calibratable latency cost model.
"""

from .analysis import (
    AffineCost,
    CalibrationResult,
    CostParams,
    SweepRow,
    TrafficBreakdown,
    TrafficEntry,
    calibrate_cost_params,
    dataflow_traffic,
    estimate_collective_latency,
    estimate_dataflow_latency,
    load_fixture,
    raw_profile_params,
    reconcile_traffic,
    sweep_cluster_sizes,
    traffic_gather,
    traffic_reduce,
)
from .collectives import (
    GatherLayout,
    ReduceOp,
    canonicalize_gathered,
    cluster_gather,
    cluster_reduce,
    ring_partners,
)
from .dataflows import (
    DecodeResult,
    absorb_weights,
    partial_flash_attention,
    run_dataflow,
    run_fused_mha_decode,
    run_fused_mla_decode,
    run_splithead_decode,
)
from .errors import (
    DimensionError,
    FixtureError,
    InvalidClusterSize,
    ShapeMismatch,
    SimulationError,
    SmemOverflow,
)
from .oracle import dense_mha_decode, dense_mla_decode, ffn_reference
from .scenarios import (
    DecodeScenario,
    ModelDims,
    random_mha_scenario,
    random_mla_scenario,
    with_preappended_cache,
)
from .simcore import ClusterConfig, ClusterState, Tensor, TrafficLedger, build_cluster

__version__ = "0.1.0"
