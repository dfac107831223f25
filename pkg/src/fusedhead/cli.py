"""Command-line harness: correctness checks, gradient checks, sweeps, cost reports.

Subcommands:
  check      oracle comparisons of the fused forwards/backward across a tile grid
  gradcheck  both backwards against central finite differences
  bench      dimension sweep with timing and instrumented peak/saved bytes (CSV)
  cost       analytical traffic/peak table for all four strategies

Exit codes: 0 on pass, 1 on any failed check, 2 on usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from typing import Sequence

from .bench import (
    BENCH_CSV_HEADER,
    DimsGuardError,
    STRATEGY_NAMES,
    SweepSpec,
    records_to_csv,
    run_check,
    run_gradcheck,
    run_sweep,
)
from .costmodel import COST_CSV_HEADER, DtypeSpec, all_reports, format_reports, reports_to_csv_rows
from .fused import TileConfig
from .tensor import Dims


def _parse_dims(text: str) -> Dims:
    parts = text.lower().split("x")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"dims must look like BxSxDxV, got {text!r}")
    try:
        b, s, d, v = (int(p) for p in parts)
        return Dims(b, s, d, v)
    except (ValueError, OverflowError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _parse_tile(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"tile must look like CxBT, got {text!r}")
    try:
        c, bt = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if c < 1 or bt < 1:
        raise argparse.ArgumentTypeError(f"tile sizes must be positive, got {text!r}")
    return c, bt


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values:
        raise argparse.ArgumentTypeError("values must be a nonempty comma list")
    return values


def _parse_strategies(text: str) -> list[str]:
    names = [p.strip() for p in text.split(",") if p.strip()]
    unknown = [n for n in names if n not in STRATEGY_NAMES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown strategies {unknown}; known: {list(STRATEGY_NAMES)}")
    return names


def _add_common(p: argparse.ArgumentParser, default_dims: str) -> None:
    p.add_argument("--dims", type=_parse_dims, default=_parse_dims(default_dims),
                   help=f"problem sizes as BxSxDxV (default {default_dims})")
    p.add_argument("--seed", type=int, default=42, help="seed for instance generation")
    p.add_argument("--tile", type=_parse_tile, default=None,
                   help="tile sizes as CxBT (vocab tile x batch tile); default adapts to dims")
    p.add_argument("--threads", type=int, default=1, help="worker threads per operator")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed-order accumulation: bit-identical across runs, tilings, threads")
    p.add_argument("--force", action="store_true", help="override the desk-scale dims guard")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusedhead", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_check = sub.add_parser("check", help="oracle comparisons across a tile-config grid")
    _add_common(p_check, "2x3x4x5")

    p_grad = sub.add_parser("gradcheck", help="backwards vs central finite differences")
    _add_common(p_grad, "2x3x4x5")
    p_grad.add_argument("--fd-step", type=float, default=1e-3, help="finite-difference step size")

    p_bench = sub.add_parser("bench", help="dimension sweep; emits CSV")
    _add_common(p_bench, "4x32x16x256")
    p_bench.add_argument("--axis", choices=("batch", "seq", "vocab"), required=True,
                         help="which dimension to sweep")
    p_bench.add_argument("--values", type=_parse_values, required=True,
                         help="strictly increasing comma list of axis values")
    p_bench.add_argument("--strategies", type=_parse_strategies, default=list(STRATEGY_NAMES),
                         help=f"comma list out of {','.join(STRATEGY_NAMES)}")
    p_bench.add_argument("--repeats", type=int, default=20, help="timed iterations per point")
    p_bench.add_argument("--warmup", type=int, default=5, help="untimed warm-up iterations")
    p_bench.add_argument("--csv", metavar="PATH", default=None,
                         help="write CSV here instead of stdout")
    p_bench.add_argument("--mem-cap-bytes", type=int, default=None,
                         help="allocation cap; strategies over it emit OOM sentinel rows")

    p_cost = sub.add_parser("cost", help="analytical traffic and peak-activation table")
    _add_common(p_cost, "512x512x768x30522")
    p_cost.add_argument("--act-bytes", type=int, choices=(2, 4), default=2,
                        help="activation element width for the byte arithmetic")
    p_cost.add_argument("--csv", metavar="PATH", default=None,
                        help="write per-stage CSV here instead of the table")

    return parser


def _tile_config(args, dims: Dims) -> TileConfig | None:
    if args.tile is None:
        return None
    c, bt = args.tile
    cfg = TileConfig(vocab_tile=c, batch_tile=bt, deterministic=args.deterministic,
                     num_threads=args.threads)
    cfg.validate_for(dims)
    return cfg


def _cmd_check(args, parser) -> int:
    cfg = _tile_config(args, args.dims)
    if cfg is not None:
        # Oracle comparisons always use the fixed-order kernels so argmax
        # indices are exactly comparable.
        cfg = replace(cfg, deterministic=True)
    result = run_check(args.dims, args.seed, configs=[cfg] if cfg else None,
                       num_threads=args.threads, force=args.force)
    print("\n".join(result.lines))
    return 0 if result.passed else 1


def _cmd_gradcheck(args, parser) -> int:
    if args.fd_step <= 0:
        parser.error(f"--fd-step must be positive, got {args.fd_step}")
    result = run_gradcheck(args.dims, args.seed, args.fd_step, force=args.force)
    print("\n".join(result.lines))
    return 0 if result.passed else 1


def _cmd_bench(args, parser) -> int:
    spec = SweepSpec(
        axis=args.axis,
        values=args.values,
        base=args.dims,
        strategies=args.strategies,
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        tile=args.tile,
        deterministic=args.deterministic,
        num_threads=args.threads,
        mem_cap_bytes=args.mem_cap_bytes,
    )
    try:
        spec.validate()
    except ValueError as exc:
        parser.error(str(exc))
    csv_text = records_to_csv(run_sweep(spec))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def _cmd_cost(args, parser) -> int:
    dt = DtypeSpec(activation_bytes=args.act_bytes)
    cfg = _tile_config(args, args.dims)
    reports = all_reports(args.dims, dt, cfg)
    if args.csv:
        text = "\n".join([COST_CSV_HEADER] + reports_to_csv_rows(reports)) + "\n"
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        d = args.dims
        print(f"dims B={d.B} S={d.S} D={d.D} V={d.V}  activation_bytes={args.act_bytes}")
        print(format_reports(reports))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "check": _cmd_check,
        "gradcheck": _cmd_gradcheck,
        "bench": _cmd_bench,
        "cost": _cmd_cost,
    }
    try:
        return handlers[args.command](args, parser)
    except DimsGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
