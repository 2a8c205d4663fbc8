"""Command-line interface: verify, simulate, traffic, calibrate, sweep.

Reports are deterministic given (config, seed): identical invocations produce
byte-identical CSV or JSON. JSON documents carry ``schema_version`` "1".
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .analysis import CostParams, AffineCost, ON_CHIP, OFF_CHIP
from .dataflows import FUSED_MLA, SPLIT_HEAD, SPLIT_TOKEN, run_dataflow
from .errors import SimulationError
from .oracle import dense_mha_decode, dense_mla_decode
from .scenarios import ModelDims, random_mha_scenario, random_mla_scenario

SCHEMA_VERSION = "1"

DEFAULT_TOLERANCE = {"f32": 1e-5, "f16": 3e-2}
DTYPE_BYTES = {"f32": 4, "f16": 2}


@dataclass(frozen=True)
class ModelPreset:
    """Named dimension preset. ``assumed`` lists fields that are documented
    placeholders rather than published architecture values."""

    attention: str  # "mha" or "mla"
    hidden_dim: int
    n_heads: int
    head_dim: int
    kv_lora_rank: int | None = None
    assumed: tuple[str, ...] = ()


PRESETS = {
    "llama2_7b": ModelPreset(attention="mha", hidden_dim=4096, n_heads=32, head_dim=128),
    "deepseek_v2_lite": ModelPreset(
        attention="mla",
        hidden_dim=2048,
        n_heads=16,
        head_dim=128,
        kv_lora_rank=512,
        assumed=("hidden_dim", "n_heads", "head_dim"),
    ),
}

REPORT_FIELDS = [
    "scenario_id",
    "dataflow",
    "N",
    "S",
    "B",
    "dtype",
    "seed",
    "dsmem_bytes_measured",
    "dsmem_bytes_analytical",
    "est_latency_on_chip_us",
    "est_latency_off_chip_us",
    "max_abs_error_vs_oracle",
    "status",
]

TRAFFIC_FIELDS = [
    "dataflow",
    "N",
    "S",
    "B",
    "dtype",
    "per_cluster_bytes",
    "per_cluster_stats_bytes",
    "model_total_bytes",
    "alt_form_bytes",
    "est_latency_on_chip_us",
    "est_latency_off_chip_us",
]

SWEEP_FIELDS = [
    "dataflow",
    "N",
    "S",
    "B",
    "dsmem_bytes",
    "per_cluster_bytes",
    "est_latency_us",
    "active_block_slots",
    "is_best",
]


def _power_of_two(text: str) -> int:
    value = int(text)
    if value < 1 or value > 16 or (value & (value - 1)) != 0:
        raise argparse.ArgumentTypeError(
            f"cluster size must be a power of two in [1, 16], got {value}"
        )
    return value


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def _pow2_list(text: str) -> list[int]:
    return [_power_of_two(part) for part in text.split(",") if part]


def _emit(rows: list[dict], fields: list[str], fmt: str, out: str | None, command: str) -> None:
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "command": command, "rows": rows}
        text = json.dumps(doc, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _build_dims(args) -> tuple[ModelDims, str]:
    """Resolve preset plus overrides into ModelDims and an attention kind."""
    if args.model == "custom":
        attention = "mla" if args.dataflow == FUSED_MLA else "mha"
        hidden_dim, n_heads, head_dim = args.D, args.heads, args.H
        kv_lora_rank = args.l
        if None in (hidden_dim, n_heads, head_dim):
            raise SimulationError("custom model requires --D, --heads and --H")
    else:
        preset = PRESETS[args.model]
        attention = preset.attention
        hidden_dim = args.D or preset.hidden_dim
        n_heads = args.heads or preset.n_heads
        head_dim = args.H or preset.head_dim
        kv_lora_rank = args.l or preset.kv_lora_rank
    dims = ModelDims(
        batch_size=args.B,
        hidden_dim=hidden_dim,
        n_heads=n_heads,
        head_dim=head_dim,
        seq_len=args.S,
        kv_lora_rank=kv_lora_rank,
        dtype_bytes=DTYPE_BYTES[args.dtype],
    )
    if args.dataflow == FUSED_MLA and attention != "mla":
        raise SimulationError(f"model {args.model} does not define latent attention")
    if args.dataflow in (SPLIT_TOKEN, SPLIT_HEAD) and attention != "mha":
        raise SimulationError(f"model {args.model} uses latent attention; pick --dataflow fused_mla")
    return dims, attention


def _build_scenario(args, dims):
    if args.dataflow == FUSED_MLA:
        return random_mla_scenario(dims, n_blocks=args.N, seed=args.seed)
    return random_mha_scenario(dims, n_blocks=args.N, seed=args.seed)


def _load_params(path: str | None) -> CostParams:
    if path is None:
        return analysis.calibrate_cost_params(analysis.load_fixture()).params
    doc = json.loads(Path(path).read_text())
    tables = {}
    for channel in (ON_CHIP, OFF_CHIP):
        tables[channel] = {
            op: AffineCost(entry["alpha_us"], entry["bytes_per_us"])
            for op, entry in doc["params"][channel].items()
        }
    return CostParams(tables[ON_CHIP], tables[OFF_CHIP], doc.get("off_chip_rounds", 2))


def _scenario_id(args) -> str:
    return (
        f"{args.model}-{args.dataflow}-N{args.N}-S{args.S}-B{args.B}"
        f"-{args.dtype}-seed{args.seed}"
    )


def _report_row(args, result, breakdown, params, max_err: float | None, status: str) -> dict:
    on_us = analysis.estimate_dataflow_latency(breakdown, params, ON_CHIP)
    off_us = analysis.estimate_dataflow_latency(breakdown, params, OFF_CHIP)
    return {
        "scenario_id": _scenario_id(args),
        "dataflow": args.dataflow,
        "N": args.N,
        "S": args.S,
        "B": args.B,
        "dtype": args.dtype,
        "seed": args.seed,
        "dsmem_bytes_measured": result.dsmem_bytes,
        "dsmem_bytes_analytical": breakdown.model_total_bytes,
        "est_latency_on_chip_us": round(on_us, 6),
        "est_latency_off_chip_us": round(off_us, 6),
        "max_abs_error_vs_oracle": "" if max_err is None else repr(float(max_err)),
        "status": status,
    }


def _run_and_reconcile(args):
    dims, _ = _build_dims(args)
    scenario = _build_scenario(args, dims)
    result = run_dataflow(args.dataflow, scenario)
    breakdown = analysis.reconcile_traffic(args.dataflow, result, dims)
    return scenario, result, breakdown


def cmd_verify(args) -> int:
    """Run a dataflow plus its oracle; exit 0 iff all invariants hold."""
    scenario, result, breakdown = _run_and_reconcile(args)
    if args.dataflow == FUSED_MLA:
        reference = dense_mla_decode(scenario, "absorbed")
    else:
        reference = dense_mha_decode(scenario)
    max_err = float(np.abs(result.output - reference).max())
    tolerance = args.tol if args.tol is not None else DEFAULT_TOLERANCE[args.dtype]

    failures = []
    if not breakdown.reconciled:
        failures.append(
            {
                "check": "traffic_reconciliation",
                "detail": [
                    {
                        "stage": e.stage,
                        "analytical_bytes": e.analytical_bytes,
                        "measured_bytes": e.measured_bytes,
                    }
                    for e in breakdown.entries
                    if not e.reconciled
                ],
            }
        )
    expected_rounds = analysis.rounds_on_chip(args.N)
    bad_rounds = [
        {"stage": t.stage, "head": t.head, "rounds": t.trace.rounds}
        for t in result.collectives
        if t.trace.rounds != expected_rounds
    ]
    if bad_rounds:
        failures.append({"check": "round_count", "detail": bad_rounds})
    if max_err > tolerance:
        failures.append(
            {"check": "oracle_error", "max_abs_error": max_err, "tolerance": tolerance}
        )

    params = _load_params(args.params)
    status = "pass" if not failures else "fail"
    row = _report_row(args, result, breakdown, params, max_err, status)
    _emit([row], REPORT_FIELDS, args.format, args.out, "verify")
    if failures:
        record = {"schema_version": SCHEMA_VERSION, "status": "fail", "failures": failures}
        sys.stderr.write(json.dumps(record, indent=2) + "\n")
        return 1
    return 0


def cmd_simulate(args) -> int:
    """Run a dataflow and report its measured traffic; no oracle compare."""
    _, result, breakdown = _run_and_reconcile(args)
    params = _load_params(args.params)
    row = _report_row(args, result, breakdown, params, None, "simulated")
    _emit([row], REPORT_FIELDS, args.format, args.out, "simulate")
    return 0


def cmd_traffic(args) -> int:
    """Analytical traffic table over a (dataflow, N, S) grid.

    When both split_token and split_head are requested, gap rows
    (``split_head_minus_split_token``) spell out the crossover between the
    sequence-independent and sequence-proportional dataflows.
    """
    params = _load_params(args.params)
    dataflows = args.dataflow.split(",")
    rows = []
    totals: dict[tuple[str, int, int], int] = {}
    for n_blocks in args.N_set:
        for seq_len in args.S_set:
            for kind in dataflows:
                sub = argparse.Namespace(**vars(args))
                sub.dataflow, sub.N, sub.S = kind, n_blocks, seq_len
                dims, _ = _build_dims(sub)
                breakdown = analysis.dataflow_traffic(kind, dims, n_blocks)
                on_us = analysis.estimate_dataflow_latency(breakdown, params, ON_CHIP)
                off_us = analysis.estimate_dataflow_latency(breakdown, params, OFF_CHIP)
                totals[(kind, n_blocks, seq_len)] = breakdown.headline_bytes
                rows.append(
                    {
                        "dataflow": kind,
                        "N": n_blocks,
                        "S": seq_len,
                        "B": args.B,
                        "dtype": args.dtype,
                        "per_cluster_bytes": breakdown.headline_bytes,
                        "per_cluster_stats_bytes": breakdown.stats_bytes,
                        "model_total_bytes": breakdown.model_total_bytes,
                        "alt_form_bytes": breakdown.swapped_form_bytes
                        if breakdown.swapped_form_bytes is not None
                        else "",
                        "est_latency_on_chip_us": round(on_us, 6),
                        "est_latency_off_chip_us": round(off_us, 6),
                    }
                )
    if SPLIT_TOKEN in dataflows and SPLIT_HEAD in dataflows:
        for n_blocks in args.N_set:
            for seq_len in args.S_set:
                gap = totals[(SPLIT_HEAD, n_blocks, seq_len)] - totals[
                    (SPLIT_TOKEN, n_blocks, seq_len)
                ]
                rows.append(
                    {
                        "dataflow": "split_head_minus_split_token",
                        "N": n_blocks,
                        "S": seq_len,
                        "B": args.B,
                        "dtype": args.dtype,
                        "per_cluster_bytes": gap,
                        "per_cluster_stats_bytes": "",
                        "model_total_bytes": "",
                        "alt_form_bytes": "",
                        "est_latency_on_chip_us": "",
                        "est_latency_off_chip_us": "",
                    }
                )
    _emit(rows, TRAFFIC_FIELDS, args.format, args.out, "traffic")
    return 0


def cmd_calibrate(args) -> int:
    """Fit cost parameters from a microbenchmark fixture and write them out."""
    points = analysis.load_fixture(args.fixture)
    calibration = analysis.calibrate_cost_params(points)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "n_blocks": calibration.n_blocks,
        "off_chip_rounds": calibration.params.off_chip_rounds,
        "params": {
            channel: {
                op: {"alpha_us": cost.alpha_us, "bytes_per_us": cost.bytes_per_us}
                for op, cost in sorted(table.items())
            }
            for channel, table in (
                (ON_CHIP, calibration.params.on_chip),
                (OFF_CHIP, calibration.params.off_chip),
            )
        },
        "residuals": [
            {
                "operation": r.operation,
                "size_kb": r.size_kb,
                "channel": r.channel,
                "actual_us": r.actual_us,
                "predicted_us": round(r.predicted_us, 9),
                "relative_residual": round(r.relative_residual, 9),
            }
            for r in calibration.residuals
        ],
    }
    out = Path(args.out)
    if out.exists() and not args.force:
        sys.stderr.write(f"{out} exists; pass --force to overwrite\n")
        return 1
    out.write_text(json.dumps(doc, indent=2) + "\n")
    sys.stdout.write(
        f"wrote {out} (max |relative residual| = "
        f"{calibration.max_abs_relative_residual:.4f})\n"
    )
    return 0


def cmd_sweep(args) -> int:
    """Cluster-size sweep: ledger-verified traffic, latency, occupancy."""
    dims, _ = _build_dims(args)
    params = _load_params(args.params)
    sweep = analysis.sweep_cluster_sizes(
        args.dataflow, dims, args.N_set, seed=args.seed, params=params
    )
    rows = [
        {
            "dataflow": args.dataflow,
            "N": r.n_blocks,
            "S": args.S,
            "B": args.B,
            "dsmem_bytes": r.dsmem_bytes,
            "per_cluster_bytes": r.per_cluster_bytes,
            "est_latency_us": round(r.est_latency_us, 6),
            "active_block_slots": r.active_block_slots,
            "is_best": r.is_best,
        }
        for r in sweep
    ]
    _emit(rows, SWEEP_FIELDS, args.format, args.out, "sweep")
    return 0


def _apply_config_file(argv: list[str]) -> list[str]:
    """Expand ``--config file.json`` into leading defaults for the parser.

    Config keys mirror the flags (model, dataflow, N, S, B, dtype, seed,
    format, out, and dims overrides D/heads/H/l); explicit flags win.
    """
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    path = argv[idx + 1]
    rest = argv[:idx] + argv[idx + 2 :]
    doc = json.loads(Path(path).read_text())
    dims = doc.pop("dims", {})
    expanded: list[str] = []
    for key, value in {**doc, **dims}.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        expanded.extend([flag, str(value)])
    # Prepend config-derived arguments so explicit CLI flags override them.
    return [rest[0], *expanded, *rest[1:]] if rest else expanded


def _add_common(
    parser: argparse.ArgumentParser, with_n: bool = True, dataflow_list: bool = False
) -> None:
    parser.add_argument("--model", choices=[*PRESETS, "custom"], default="llama2_7b")
    if dataflow_list:
        parser.add_argument(
            "--dataflow",
            default=f"{SPLIT_TOKEN},{SPLIT_HEAD}",
            help="comma-separated dataflow kinds",
        )
    else:
        parser.add_argument(
            "--dataflow", default=SPLIT_TOKEN, choices=[SPLIT_TOKEN, FUSED_MLA, SPLIT_HEAD]
        )
    if with_n:
        parser.add_argument("--N", type=_power_of_two, default=4, help="cluster size (2^k, k<=4)")
    parser.add_argument("--S", type=int, default=64, help="cached sequence length")
    parser.add_argument("--B", type=int, default=1, help="batch size")
    parser.add_argument("--dtype", choices=["f32", "f16"], default="f32")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--D", type=int, default=None, help="hidden dimension override")
    parser.add_argument("--heads", type=int, default=None, help="head count override")
    parser.add_argument("--H", type=int, default=None, help="head dimension override")
    parser.add_argument("--l", type=int, default=None, help="latent rank override")
    parser.add_argument("--params", default=None, help="cost-params JSON from `calibrate`")
    parser.add_argument("--out", default=None, help="write the report here instead of stdout")
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    parser.add_argument("--config", default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterdec",
        description="Simulate cluster-centric decoding dataflows and check their "
        "numerics and communication against analytical models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run a dataflow and its dense oracle")
    _add_common(p_verify)
    p_verify.add_argument("--tol", type=float, default=None, help="max-abs-error tolerance")
    p_verify.set_defaults(func=cmd_verify)

    p_sim = sub.add_parser("simulate", help="run a dataflow; report ledger traffic")
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_traffic = sub.add_parser("traffic", help="analytical traffic over a grid")
    _add_common(p_traffic, with_n=False, dataflow_list=True)
    p_traffic.add_argument("--N-set", dest="N_set", type=_pow2_list, default=[4])
    p_traffic.add_argument("--S-set", dest="S_set", type=_int_list, default=[128, 1024, 4096])
    p_traffic.set_defaults(func=cmd_traffic)

    p_cal = sub.add_parser("calibrate", help="fit cost params from a fixture CSV")
    p_cal.add_argument("--fixture", default=None, help="fixture path (default: bundled)")
    p_cal.add_argument("--out", default="cost_params.json")
    p_cal.add_argument("--force", action="store_true", help="overwrite an existing file")
    p_cal.set_defaults(func=cmd_calibrate)

    p_sweep = sub.add_parser("sweep", help="cluster-size sweep with occupancy proxy")
    _add_common(p_sweep, with_n=False)
    p_sweep.add_argument("--N-set", dest="N_set", type=_pow2_list, default=[1, 2, 4, 8, 16])
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_file(argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SimulationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
