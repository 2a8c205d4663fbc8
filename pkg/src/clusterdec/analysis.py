"""Analytical traffic model, ledger reconciliation, and the latency cost model.

The closed-form channel traffic of the two collectives is

    reduce: size * log2(N) * N        (constant message size, log2(N) rounds)
    gather: size * (N - 1) * N        (message size doubles every round)

where ``size`` is the reduce buffer / gather segment size in bytes and N the
cluster size. ``dataflow_traffic`` composes these into per-stage budgets for
the three dataflows, and ``reconcile_traffic`` checks them byte-for-byte
against a simulated run's ledger.

Collective latency is an affine model per (primitive, channel):

    rounds(N) * alpha + per_block_bytes(primitive, payload, N) / beta

with rounds = log2(N) on chip and a fixed kernel-boundary count off chip.
``calibrate_cost_params`` fits the four (primitive, channel) groups of a
microbenchmark fixture by least squares, constraining the on-chip fit to
stay below the off-chip fit so the model never predicts an on-chip collective
to be the slower option.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .dataflows import (
    DATAFLOW_KINDS,
    FUSED_MLA,
    MERGED,
    SPLIT_HEAD,
    SPLIT_TOKEN,
    TWO_PASS,
    DecodeResult,
)
from .errors import DimensionError, FixtureError
from .scenarios import ModelDims

REDUCE = "reduce"
GATHER = "gather"
ON_CHIP = "on_chip"
OFF_CHIP = "off_chip"

DEFAULT_TOTAL_SMS = 132


def _check_power_of_two(n: int) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise DimensionError(f"cluster size must be a power of two, got {n}")


def rounds_on_chip(n_blocks: int) -> int:
    _check_power_of_two(n_blocks)
    return n_blocks.bit_length() - 1  # log2


def traffic_reduce(size_bytes: int, n_blocks: int) -> int:
    """Total channel bytes for one reduce: size * log2(N) * N."""
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    return size_bytes * rounds_on_chip(n_blocks) * n_blocks


def traffic_gather(size_bytes: int, n_blocks: int) -> int:
    """Total channel bytes for one gather: size * (N - 1) * N.

    Each block forwards 1 + 2 + ... + N/2 = N - 1 segments over the log2(N)
    doubling rounds; ``traffic_gather_doubling_form`` spells that out.
    """
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    _check_power_of_two(n_blocks)
    return size_bytes * (n_blocks - 1) * n_blocks


def traffic_gather_doubling_form(size_bytes: int, n_blocks: int) -> int:
    """Geometric-series form size * (2^(log2(N/2)+1) - 1) * N; equals
    ``traffic_gather`` for every power-of-two N."""
    _check_power_of_two(n_blocks)
    if n_blocks == 1:
        return 0
    factor = 2 ** (int(math.log2(n_blocks // 2)) + 1) - 1
    return size_bytes * factor * n_blocks


def per_block_bytes(primitive: str, payload_bytes: int, n_blocks: int) -> int:
    """Bytes a single block sends during one collective."""
    _check_power_of_two(n_blocks)
    if primitive == REDUCE:
        return payload_bytes * rounds_on_chip(n_blocks)
    if primitive == GATHER:
        return payload_bytes * (n_blocks - 1)
    raise ValueError(f"unknown primitive {primitive!r}")


# ---------------------------------------------------------------------------
# Per-dataflow traffic budgets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrafficEntry:
    """One collective stage of a dataflow, per cluster.

    ``payload_bytes`` is the reduce buffer / gather segment size;
    ``analytical_bytes`` the closed-form channel total. ``measured_bytes`` is
    filled by :func:`reconcile_traffic`. Softmax-statistics stages are marked
    so headline totals can exclude their (negligible) contribution.
    """

    stage: str
    primitive: str
    payload_bytes: int
    analytical_bytes: int
    is_stats: bool = False
    measured_bytes: int | None = None

    @property
    def reconciled(self) -> bool:
        return self.measured_bytes == self.analytical_bytes


@dataclass
class TrafficBreakdown:
    kind: str
    n_blocks: int
    n_clusters: int
    entries: list[TrafficEntry]
    swapped_form_bytes: int | None = None  # see ``dataflow_traffic``

    @property
    def headline_bytes(self) -> int:
        """Per-cluster tensor traffic, statistics excluded."""
        return sum(e.analytical_bytes for e in self.entries if not e.is_stats)

    @property
    def stats_bytes(self) -> int:
        return sum(e.analytical_bytes for e in self.entries if e.is_stats)

    @property
    def total_bytes(self) -> int:
        return self.headline_bytes + self.stats_bytes

    @property
    def model_total_bytes(self) -> int:
        """All clusters (heads) of the full decode step."""
        return self.total_bytes * self.n_clusters

    @property
    def reconciled(self) -> bool:
        return all(e.reconciled for e in self.entries)


def _entry(stage, primitive, payload_bytes, n_blocks, is_stats=False) -> TrafficEntry:
    total = (
        traffic_reduce(payload_bytes, n_blocks)
        if primitive == REDUCE
        else traffic_gather(payload_bytes, n_blocks)
    )
    return TrafficEntry(stage, primitive, payload_bytes, total, is_stats)


def normalize_kind(kind: str) -> str:
    if kind == "split_token_mha":
        return SPLIT_TOKEN
    if kind not in DATAFLOW_KINDS:
        raise DimensionError(f"unknown dataflow kind {kind!r}")
    return kind


def dataflow_traffic(
    kind: str, dims: ModelDims, n_blocks: int, stats_mode: str = TWO_PASS
) -> TrafficBreakdown:
    """Per-cluster analytical traffic budget for one dataflow.

    Every payload is an exact element count times ``dims.dtype_bytes``, so
    the totals must match a simulated ledger as integers. The split_head
    score reduce covers the attended length ``seq_len + batch_size``: the
    new token's rows are part of the reduced score matrix.

    For split_token the breakdown also carries ``swapped_form_bytes``, an
    alternate closed form seen in some accountings that swaps the two
    collectives' payloads (reduce over 3h, gather over H). It does not
    reconcile with the ledger and is reported for comparison only.
    """
    kind = normalize_kind(kind)
    _check_power_of_two(n_blocks)
    d = dims
    nbytes = d.dtype_bytes
    batch = d.batch_size
    if d.head_dim % n_blocks:
        raise DimensionError(f"head_dim {d.head_dim} not divisible by {n_blocks}")
    h_slice = d.head_dim // n_blocks

    def stats_entries() -> list[TrafficEntry]:
        if stats_mode == MERGED:
            return [_entry("stats_merge_reduce", REDUCE, 2 * batch * nbytes, n_blocks, True)]
        return [
            _entry("stats_max_reduce", REDUCE, batch * nbytes, n_blocks, True),
            _entry("stats_sum_reduce", REDUCE, batch * nbytes, n_blocks, True),
        ]

    swapped = None
    if kind == SPLIT_TOKEN:
        entries = [
            _entry("qkv_gather", GATHER, batch * 3 * h_slice * nbytes, n_blocks),
            *stats_entries(),
            _entry("attn_out_reduce", REDUCE, batch * d.head_dim * nbytes, n_blocks),
        ]
        swapped = traffic_reduce(batch * 3 * h_slice * nbytes, n_blocks) + traffic_gather(
            batch * d.head_dim * nbytes, n_blocks
        )
    elif kind == FUSED_MLA:
        if d.kv_lora_rank is None or d.kv_lora_rank % n_blocks:
            raise DimensionError("fused_mla needs kv_lora_rank divisible by cluster size")
        rank_slice = d.kv_lora_rank // n_blocks
        entries = [
            _entry("q_proj_gather", GATHER, batch * h_slice * nbytes, n_blocks),
            _entry("latent_kv_gather", GATHER, batch * rank_slice * nbytes, n_blocks),
            _entry("absorbed_q_gather", GATHER, batch * rank_slice * nbytes, n_blocks),
            *stats_entries(),
            _entry("attn_out_reduce", REDUCE, batch * d.kv_lora_rank * nbytes, n_blocks),
            _entry("down_proj_reduce", REDUCE, batch * d.head_dim * nbytes, n_blocks),
        ]
    else:  # split_head
        attended = d.seq_len + batch
        entries = [
            _entry("score_reduce", REDUCE, batch * attended * nbytes, n_blocks),
            _entry("out_proj_reduce", REDUCE, batch * d.hidden_dim * nbytes, n_blocks),
        ]
    return TrafficBreakdown(kind, n_blocks, d.n_heads, entries, swapped)


def reconcile_traffic(kind: str, result: DecodeResult, dims: ModelDims, stats_mode: str = TWO_PASS) -> TrafficBreakdown:
    """Fill measured per-cluster bytes from a run's stage traffic.

    Heads execute identical schedules, so each stage's ledger bytes must be
    exactly ``n_heads`` times the per-cluster analytical value; any remainder
    is surfaced as a mismatch rather than rounded away.
    """
    breakdown = dataflow_traffic(kind, dims, result.n_blocks, stats_mode)
    heads = result.n_clusters
    measured_stages = dict(result.stage_traffic)
    entries = []
    for entry in breakdown.entries:
        total = measured_stages.pop(entry.stage, 0)
        if heads > 0 and total % heads == 0:
            measured = total // heads
        else:
            measured = total  # mismatch will show against the per-cluster value
        entries.append(replace(entry, measured_bytes=measured))
    if measured_stages:
        extra = ", ".join(sorted(measured_stages))
        raise DimensionError(f"run recorded unmodeled stages: {extra}")
    breakdown.entries = entries
    return breakdown


# ---------------------------------------------------------------------------
# Latency cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineCost:
    """Latency = rounds * alpha_us + bytes / bytes_per_us."""

    alpha_us: float
    bytes_per_us: float


@dataclass(frozen=True)
class CostParams:
    on_chip: dict
    off_chip: dict
    off_chip_rounds: int = 2  # kernel boundaries of the global-memory path

    def cost(self, channel: str, primitive: str) -> AffineCost:
        table = self.on_chip if channel == ON_CHIP else self.off_chip
        return table[primitive]


def estimate_collective_latency(
    primitive: str,
    payload_bytes: int,
    n_blocks: int,
    channel: str,
    params: CostParams,
) -> float:
    """Microseconds for one collective; 0 for a single-block cluster."""
    _check_power_of_two(n_blocks)
    if n_blocks == 1:
        return 0.0
    if channel not in (ON_CHIP, OFF_CHIP):
        raise ValueError(f"unknown channel {channel!r}")
    cost = params.cost(channel, primitive)
    rounds = rounds_on_chip(n_blocks) if channel == ON_CHIP else params.off_chip_rounds
    return rounds * cost.alpha_us + per_block_bytes(primitive, payload_bytes, n_blocks) / cost.bytes_per_us


def estimate_dataflow_latency(
    breakdown: TrafficBreakdown, params: CostParams, channel: str, include_stats: bool = True
) -> float:
    """Per-cluster latency: the sum of its collectives' estimates."""
    total = 0.0
    for entry in breakdown.entries:
        if entry.is_stats and not include_stats:
            continue
        total += estimate_collective_latency(
            entry.primitive, entry.payload_bytes, breakdown.n_blocks, channel, params
        )
    return total


# ---------------------------------------------------------------------------
# Calibration against a microbenchmark fixture
# ---------------------------------------------------------------------------

FIXTURE_COLUMNS = ("operation", "size_kb", "channel", "latency_us")


@dataclass(frozen=True)
class FixturePoint:
    operation: str
    size_kb: float
    channel: str
    latency_us: float


@dataclass(frozen=True)
class ResidualPoint:
    operation: str
    size_kb: float
    channel: str
    actual_us: float
    predicted_us: float

    @property
    def relative_residual(self) -> float:
        return (self.predicted_us - self.actual_us) / self.actual_us


@dataclass
class CalibrationResult:
    params: CostParams
    residuals: list[ResidualPoint]
    n_blocks: int

    @property
    def max_abs_relative_residual(self) -> float:
        return max(abs(r.relative_residual) for r in self.residuals)


def bundled_fixture_path() -> Path:
    return Path(resources.files("clusterdec") / "fixtures" / "table1.csv")


def load_fixture(path: "Path | str | None" = None) -> list[FixturePoint]:
    """Parse a fixture CSV; '#' lines are comments. Errors carry line numbers."""
    path = Path(path) if path is not None else bundled_fixture_path()
    points: list[FixturePoint] = []
    header: list[str] | None = None
    with open(path, newline="") as handle:
        for lineno, row in enumerate(csv.reader(handle), start=1):
            if not row or (row[0].lstrip().startswith("#")):
                continue
            if header is None:
                header = [cell.strip() for cell in row]
                if tuple(header) != FIXTURE_COLUMNS:
                    raise FixtureError(
                        f"{path}:{lineno}: expected header {','.join(FIXTURE_COLUMNS)}, "
                        f"got {','.join(header)}"
                    )
                continue
            if len(row) != len(FIXTURE_COLUMNS):
                raise FixtureError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            operation, size_kb, channel, latency_us = (cell.strip() for cell in row)
            if operation not in (REDUCE, GATHER):
                raise FixtureError(f"{path}:{lineno}: unknown operation {operation!r}")
            if channel not in (ON_CHIP, OFF_CHIP):
                raise FixtureError(f"{path}:{lineno}: unknown channel {channel!r}")
            try:
                points.append(FixturePoint(operation, float(size_kb), channel, float(latency_us)))
            except ValueError as exc:
                raise FixtureError(f"{path}:{lineno}: {exc}") from exc
    if header is None:
        raise FixtureError(f"{path}:1: empty fixture (missing header)")
    if not points:
        raise FixtureError(f"{path}: fixture has a header but no data rows")
    return points


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(intercept), float(slope)


def _refit_slope(x: np.ndarray, y: np.ndarray, intercept: float) -> float:
    return float(np.dot(x, y - intercept) / np.dot(x, x))


_MIN_SLOPE = 1e-12


def calibrate_cost_params(
    points: list[FixturePoint],
    n_blocks: int = 4,
    off_chip_rounds: int = 2,
    dominance_margin: float = 0.01,
) -> CalibrationResult:
    """Least-squares affine fit per (primitive, channel) group.

    The off-chip groups are fit unconstrained. Each on-chip group is then
    constrained to lie strictly below its off-chip counterpart for every
    payload size: if the free on-chip intercept or slope would cross the
    off-chip line, it is clamped ``dominance_margin`` below it and the
    remaining parameter refit. Raises ``FixtureError`` when any group has
    fewer than two distinct sizes.
    """
    groups: dict[tuple[str, str], list[FixturePoint]] = {}
    for point in points:
        groups.setdefault((point.channel, point.operation), []).append(point)

    fits: dict[tuple[str, str], tuple[float, float]] = {}
    for (channel, operation), group in sorted(groups.items()):
        sizes = {p.size_kb for p in group}
        if len(sizes) < 2:
            raise FixtureError(
                f"degenerate fixture: {channel}/{operation} has {len(sizes)} distinct "
                f"size(s); need at least 2 to fit an affine model"
            )
        x = np.array([per_block_bytes(operation, p.size_kb * 1024, n_blocks) for p in group])
        y = np.array([p.latency_us for p in group])
        intercept, slope = _ols(x, y)
        intercept = max(intercept, 0.0)
        slope = max(slope, _MIN_SLOPE)
        fits[(channel, operation)] = (intercept, slope)

    for operation in (REDUCE, GATHER):
        if (ON_CHIP, operation) not in fits or (OFF_CHIP, operation) not in fits:
            raise FixtureError(f"fixture is missing a channel for operation {operation!r}")
        off_intercept, off_slope = fits[(OFF_CHIP, operation)]
        on_intercept, on_slope = fits[(ON_CHIP, operation)]
        group = groups[(ON_CHIP, operation)]
        x = np.array([per_block_bytes(operation, p.size_kb * 1024, n_blocks) for p in group])
        y = np.array([p.latency_us for p in group])
        if on_intercept >= off_intercept:
            on_intercept = off_intercept * (1.0 - dominance_margin)
            on_slope = max(_refit_slope(x, y, on_intercept), _MIN_SLOPE)
        if on_slope >= off_slope:
            on_slope = off_slope * (1.0 - dominance_margin)
        fits[(ON_CHIP, operation)] = (on_intercept, on_slope)

    rounds = {ON_CHIP: rounds_on_chip(n_blocks), OFF_CHIP: off_chip_rounds}
    tables = {ON_CHIP: {}, OFF_CHIP: {}}
    for (channel, operation), (intercept, slope) in fits.items():
        tables[channel][operation] = AffineCost(
            alpha_us=intercept / rounds[channel], bytes_per_us=1.0 / slope
        )
    params = CostParams(tables[ON_CHIP], tables[OFF_CHIP], off_chip_rounds)

    residuals = []
    for point in points:
        intercept, slope = fits[(point.channel, point.operation)]
        x = per_block_bytes(point.operation, point.size_kb * 1024, n_blocks)
        residuals.append(
            ResidualPoint(
                point.operation,
                point.size_kb,
                point.channel,
                point.latency_us,
                intercept + slope * x,
            )
        )
    return CalibrationResult(params, residuals, n_blocks)


def raw_profile_params(clock_ghz: float = 1.6) -> CostParams:
    """Cost parameters from raw interconnect profile points, not a fit.

    Uses two measured endpoints: ~190-cycle remote-shared-memory access
    latency (small clusters) with ~2.90 TB/s channel bandwidth (cluster size
    16), against >900 cycles for block-to-block exchange through global
    memory at ~2.96 TB/s. The cycle-to-microsecond conversion assumes the
    given SM clock; both the clock and the use of endpoint values for every
    size are assumptions, so prefer fixture calibration when available.
    """
    if clock_ghz <= 0:
        raise ValueError("clock_ghz must be positive")
    cycles_per_us = clock_ghz * 1e3
    on = AffineCost(alpha_us=190.0 / cycles_per_us, bytes_per_us=2.90e6)
    off = AffineCost(alpha_us=900.0 / cycles_per_us, bytes_per_us=2.96e6)
    return CostParams({REDUCE: on, GATHER: on}, {REDUCE: off, GATHER: off})


# ---------------------------------------------------------------------------
# Cluster-size sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    n_blocks: int
    dsmem_bytes: int  # ledger total for the full run (all heads)
    per_cluster_bytes: int
    est_latency_us: float  # per-cluster on-chip estimate
    active_block_slots: int
    is_best: bool = False


def active_block_slots(n_blocks: int, total_sms: int = DEFAULT_TOTAL_SMS) -> int:
    """Occupancy proxy: whole clusters only, floor(SMs / N) * N block slots."""
    return (total_sms // n_blocks) * n_blocks


def sweep_cluster_sizes(
    kind: str,
    dims: ModelDims,
    n_set: "list[int] | tuple[int, ...]",
    seed: int = 0,
    params: CostParams | None = None,
    total_sms: int = DEFAULT_TOTAL_SMS,
    stats_mode: str = TWO_PASS,
) -> list[SweepRow]:
    """Run one scenario per cluster size and report traffic plus latency.

    Traffic is ledger-verified: each run's stage totals must reconcile with
    the analytical budget exactly. The row with the lowest estimated latency
    is flagged, ties broken toward the smaller cluster.
    """
    from .dataflows import run_dataflow
    from .scenarios import random_mha_scenario, random_mla_scenario

    kind = normalize_kind(kind)
    if params is None:
        params = calibrate_cost_params(load_fixture()).params

    rows: list[SweepRow] = []
    for n_blocks in sorted(set(n_set)):
        if kind == FUSED_MLA:
            scenario = random_mla_scenario(dims, n_blocks=n_blocks, seed=seed)
        else:
            scenario = random_mha_scenario(dims, n_blocks=n_blocks, seed=seed)
        result = run_dataflow(kind, scenario, stats_mode=stats_mode)
        breakdown = reconcile_traffic(kind, result, dims, stats_mode)
        if not breakdown.reconciled:
            raise DimensionError(
                f"sweep at N={n_blocks}: ledger does not reconcile with the analytical model"
            )
        rows.append(
            SweepRow(
                n_blocks=n_blocks,
                dsmem_bytes=result.dsmem_bytes,
                per_cluster_bytes=breakdown.total_bytes,
                est_latency_us=estimate_dataflow_latency(breakdown, params, ON_CHIP),
                active_block_slots=active_block_slots(n_blocks, total_sms),
            )
        )
    best = min(rows, key=lambda r: (r.est_latency_us, r.n_blocks))
    return [replace(r, is_best=(r is best)) for r in rows]
