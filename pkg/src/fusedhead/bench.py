"""Benchmark sweeps, correctness checks, and gradient checks for the head.

A sweep runs each strategy across one axis (batch, seq or vocab), timing the
forward pass with a monotonic clock over warmup + repeated iterations, and
measuring the transient peak and retained saved-state bytes through the
allocation tracker. Each (strategy, value) combination yields exactly one
CSV row; a strategy that exceeds the optional allocation cap yields an OOM
sentinel row instead of aborting the sweep.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .fused import SavedSparseState, TileConfig, backward_fused, forward_fully_fused, forward_hybrid
from .memtrack import AllocationCapExceeded, AllocTracker
from .reference import (
    HeadInputs,
    HeadOutput,
    backward_eager,
    eval_head_f64,
    finite_difference_grads,
    forward_eager,
    forward_activate_then_mask,
)
from .tensor import Dims, matmul_bt, seeded_tensor

BENCH_CSV_HEADER = (
    "strategy,B,S,D,V,vocab_tile,batch_tile,threads,"
    "time_ms_med,time_ms_p10,time_ms_p90,peak_bytes,saved_bytes,y_checksum"
)

# Desk-scale guard: refuse to run full oracle suites past this many logits.
CHECK_GUARD_LOGITS = 1 << 24

# Tolerances for the oracle comparisons.
Y_REL_TOL = 1e-5
Y_ABS_FLOOR = 1e-7
MASK_ORDER_TOL = 1e-6
BACKWARD_PAIR_TOL = 1e-5
FD_TOL = 1e-4
EXPY_TOL = 1e-5


class DimsGuardError(ValueError):
    """Dims exceed the desk-scale guard; pass force=True to override."""


def _guard(dims: Dims, force: bool) -> None:
    if dims.B * dims.S * dims.V > CHECK_GUARD_LOGITS and not force:
        raise DimsGuardError(
            f"B*S*V = {dims.B * dims.S * dims.V} exceeds the desk-scale guard "
            f"({CHECK_GUARD_LOGITS}); re-run with force"
        )


def y_checksum(Y: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(Y).tobytes()) & 0xFFFFFFFF:08x}"


def _run_eager(inputs: HeadInputs, cfg: TileConfig, tracker: AllocTracker) -> HeadOutput:
    out, _ = forward_eager(inputs, deterministic=cfg.deterministic, tracker=tracker)
    return out


def _run_compiled_sim(inputs: HeadInputs, cfg: TileConfig, tracker: AllocTracker) -> HeadOutput:
    # Honest stand-in for an auto-compiled baseline: the GEMM stays a black
    # box writing the full logit tensor, everything after it runs as one
    # fused pass, and the logit tensor is what backward would retain.
    d = inputs.dims
    flat = tracker.allocate((d.B * d.S, d.V), zero=False)
    try:
        matmul_bt(inputs.H.reshape(d.B * d.S, d.D), inputs.E, inputs.b, flat,
                  deterministic=cfg.deterministic)
        L = flat.reshape(d.B, d.S, d.V)
        L *= inputs.mask[:, :, None]
        idx = np.argmax(L, axis=1).astype(np.int32)
        raw = np.take_along_axis(L, idx[:, None, :], axis=1)[:, 0, :]
        Y = np.log1p(np.maximum(raw, np.float32(0)))
        tracker.note_saved(L.nbytes)
        return HeadOutput(Y=Y, I=idx)
    finally:
        tracker.release(flat)


def _run_hybrid(inputs: HeadInputs, cfg: TileConfig, tracker: AllocTracker) -> HeadOutput:
    return forward_hybrid(inputs, cfg, tracker)


def _run_fully_fused(inputs: HeadInputs, cfg: TileConfig, tracker: AllocTracker) -> HeadOutput:
    return forward_fully_fused(inputs, cfg, tracker)


STRATEGY_RUNNERS = {
    "eager": _run_eager,
    "compiled-sim": _run_compiled_sim,
    "hybrid": _run_hybrid,
    "fully_fused": _run_fully_fused,
}
STRATEGY_NAMES = tuple(STRATEGY_RUNNERS)

_AXES = ("batch", "seq", "vocab")


@dataclass
class SweepSpec:
    """One benchmark sweep: vary one axis, keep the others fixed."""

    axis: str
    values: list[int]
    base: Dims
    strategies: list[str] = field(default_factory=lambda: list(STRATEGY_NAMES))
    repeats: int = 20
    warmup: int = 5
    seed: int = 0
    tile: tuple[int, int] | None = None  # (vocab_tile, batch_tile); default adapts per dims
    deterministic: bool = False
    num_threads: int = 1
    mem_cap_bytes: int | None = None

    def validate(self) -> None:
        if self.axis not in _AXES:
            raise ValueError(f"axis must be one of {_AXES}, got {self.axis!r}")
        if not self.values or any(v < 1 for v in self.values):
            raise ValueError("values must be a nonempty list of positive counts")
        if any(x >= y for x, y in zip(self.values, self.values[1:])):
            raise ValueError(f"values must be strictly increasing, got {self.values}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        unknown = [s for s in self.strategies if s not in STRATEGY_RUNNERS]
        if unknown:
            raise ValueError(f"unknown strategies {unknown}; known: {list(STRATEGY_NAMES)}")


@dataclass
class BenchRecord:
    """One sweep point; serializes to one CSV row. OOM rows carry None fields."""

    strategy: str
    dims: Dims
    vocab_tile: int
    batch_tile: int
    threads: int
    time_ms_med: float | None = None
    time_ms_p10: float | None = None
    time_ms_p90: float | None = None
    peak_bytes: int | None = None
    saved_bytes: int | None = None
    checksum: str = "OOM"

    @property
    def is_oom(self) -> bool:
        return self.time_ms_med is None

    def to_csv_row(self) -> str:
        d = self.dims

        def ms(x: float | None) -> str:
            return "OOM" if x is None else f"{x:.6g}"

        def by(x: int | None) -> str:
            return "OOM" if x is None else str(x)

        return (
            f"{self.strategy},{d.B},{d.S},{d.D},{d.V},{self.vocab_tile},{self.batch_tile},"
            f"{self.threads},{ms(self.time_ms_med)},{ms(self.time_ms_p10)},{ms(self.time_ms_p90)},"
            f"{by(self.peak_bytes)},{by(self.saved_bytes)},{self.checksum}"
        )


def records_to_csv(records: list[BenchRecord]) -> str:
    lines = [BENCH_CSV_HEADER] + [r.to_csv_row() for r in records]
    return "\n".join(lines) + "\n"


def _tile_for(spec: SweepSpec, dims: Dims) -> TileConfig:
    if spec.tile is None:
        return TileConfig.default_for(dims, deterministic=spec.deterministic,
                                      num_threads=spec.num_threads)
    c, bt = spec.tile
    cfg = TileConfig(vocab_tile=c, batch_tile=bt, deterministic=spec.deterministic,
                     num_threads=spec.num_threads)
    cfg.validate_for(dims)
    return cfg


def run_sweep(spec: SweepSpec) -> list[BenchRecord]:
    """Run every (strategy, axis value) combination, in order, never dropping one."""
    spec.validate()
    records: list[BenchRecord] = []
    for strategy in spec.strategies:
        runner = STRATEGY_RUNNERS[strategy]
        for value in spec.values:
            dims = spec.base.with_axis(spec.axis, value)
            cfg = _tile_for(spec, dims)
            inputs = HeadInputs.seeded(dims, spec.seed)
            record = BenchRecord(strategy, dims, cfg.vocab_tile, cfg.batch_tile, cfg.num_threads)
            try:
                for _ in range(spec.warmup):
                    runner(inputs, cfg, AllocTracker(spec.mem_cap_bytes))
                times = []
                tracker = out = None
                for _ in range(spec.repeats):
                    tracker = AllocTracker(spec.mem_cap_bytes)
                    t0 = time.perf_counter()
                    out = runner(inputs, cfg, tracker)
                    times.append((time.perf_counter() - t0) * 1e3)
                record.time_ms_med = float(np.median(times))
                record.time_ms_p10 = float(np.percentile(times, 10))
                record.time_ms_p90 = float(np.percentile(times, 90))
                record.peak_bytes = tracker.peak_bytes
                record.saved_bytes = tracker.saved_bytes
                record.checksum = y_checksum(out.Y)
            except AllocationCapExceeded:
                pass  # leave the OOM sentinel fields in place
            records.append(record)
    return records


def _config_grid(dims: Dims, num_threads: int) -> list[TileConfig]:
    # Always cover the degenerate single-column, single-tile and default tilings.
    default = TileConfig.default_for(dims)
    vocab_tiles = sorted({1, default.vocab_tile, dims.V})
    batch_tiles = sorted({1, default.batch_tile, dims.B})
    return [
        TileConfig(c, bt, deterministic=True, num_threads=num_threads)
        for c in vocab_tiles
        for bt in batch_tiles
    ]


@dataclass
class CheckResult:
    passed: bool
    lines: list[str] = field(default_factory=list)


def _compare_forward(name, ref: HeadOutput, got: HeadOutput, lines) -> bool:
    diff = np.abs(got.Y.astype(np.float64) - ref.Y.astype(np.float64))
    tol = np.maximum(Y_ABS_FLOOR, Y_REL_TOL * np.abs(ref.Y.astype(np.float64)))
    bad = diff > tol
    pos = ref.Y > 0
    idx_bad = pos & (got.I != ref.I)
    worst_flat = int(np.argmax(diff))
    b, v = np.unravel_index(worst_flat, diff.shape)
    ok = not bad.any() and not idx_bad.any()
    status = "PASS" if ok else "FAIL"
    lines.append(
        f"  {name:<28} max|dY|={diff.max():.3e} at (b={b}, v={v})"
        f"  idx_mismatch={int(idx_bad.sum())}  {status}"
    )
    if idx_bad.any():
        bb, vv = map(int, np.argwhere(idx_bad)[0])
        lines.append(f"    first index mismatch at (b={bb}, v={vv})")
    return ok


def _compare_grads(name, ref, got, tol, lines) -> bool:
    worst = 0.0
    for part in ("dH", "dE", "db"):
        dev = float(np.max(np.abs(getattr(got, part).astype(np.float64)
                                  - getattr(ref, part).astype(np.float64))))
        worst = max(worst, dev)
    ok = worst <= tol
    lines.append(f"  {name:<28} max|ddiff|={worst:.3e} (tol {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    return ok


def run_check(
    dims: Dims,
    seed: int,
    *,
    configs: list[TileConfig] | None = None,
    num_threads: int = 1,
    force: bool = False,
    corrupt: tuple[int, int] | None = None,
) -> CheckResult:
    """Forward/backward oracle comparisons across a tile-config grid.

    Comparisons run the fixed-order deterministic kernels so argmax indices
    are exactly comparable. ``corrupt`` is a fault-injection hook used by
    tests: it perturbs one (b, v) entry of the first hybrid output and must
    make the check fail, naming that entry.
    """
    _guard(dims, force)
    configs = configs or _config_grid(dims, num_threads)
    inputs = HeadInputs.seeded(dims, seed, mask_keep=0.85)
    dY = seeded_tensor((dims.B, dims.V), seed + 9)

    lines = [f"check dims={dims.B}x{dims.S}x{dims.D}x{dims.V} seed={seed} configs={len(configs)}"]
    passed = True

    ref_out, ref_saved = forward_eager(inputs, deterministic=True)
    ref_grads = backward_eager(inputs, ref_saved, ref_out, dY)

    y_postmask = forward_activate_then_mask(inputs, deterministic=True)
    mask_order_dev = float(np.max(np.abs(y_postmask - ref_out.Y)))
    ok = mask_order_dev <= MASK_ORDER_TOL
    passed &= ok
    lines.append(f"  {'mask-ordering (post-act)':<28} max|dY|={mask_order_dev:.3e}  {'PASS' if ok else 'FAIL'}")

    pos = ref_out.Y > 0
    if pos.any():
        raw = np.take_along_axis(ref_saved.L, ref_out.I[:, None, :], axis=1)[:, 0, :]
        ident = np.exp(-ref_out.Y.astype(np.float64)[pos]) * (1.0 + raw.astype(np.float64)[pos])
        expy_dev = float(np.max(np.abs(ident - 1.0)))
        ok = expy_dev <= EXPY_TOL
        passed &= ok
        lines.append(f"  {'exp(-Y) identity':<28} max|err|={expy_dev:.3e}  {'PASS' if ok else 'FAIL'}")

    for n, cfg in enumerate(configs):
        lines.append(f" config vocab_tile={cfg.vocab_tile} batch_tile={cfg.batch_tile} "
                     f"threads={cfg.num_threads}")
        out_h = forward_hybrid(inputs, cfg)
        if corrupt is not None and n == 0:
            out_h.Y[corrupt] += 1.0
        out_f = forward_fully_fused(inputs, cfg)
        passed &= _compare_forward("forward hybrid vs eager", ref_out, out_h, lines)
        passed &= _compare_forward("forward fused vs eager", ref_out, out_f, lines)
        grads = backward_fused(inputs, SavedSparseState.from_output(out_f), dY, cfg)
        passed &= _compare_grads("backward fused vs eager", ref_grads, grads,
                                 BACKWARD_PAIR_TOL, lines)

    lines.append("PASS" if passed else "FAIL")
    return CheckResult(passed=passed, lines=lines)


def run_gradcheck(dims: Dims, seed: int, h: float = 1e-3, *, force: bool = False) -> CheckResult:
    """Compare both backward implementations against central finite differences."""
    _guard(dims, force)
    inputs = HeadInputs.seeded(dims, seed, mask_keep=0.85)
    dY = seeded_tensor((dims.B, dims.V), seed + 9)

    out, saved = forward_eager(inputs, deterministic=True)
    eager_grads = backward_eager(inputs, saved, out, dY)
    fused_grads = backward_fused(inputs, SavedSparseState.from_output(out), dY)
    fd_grads, skipped = finite_difference_grads(inputs, dY, h)

    skip = {"H": np.zeros(inputs.H.shape, bool),
            "E": np.zeros(inputs.E.shape, bool),
            "b": np.zeros(inputs.b.shape, bool)}
    for name, coord in skipped:
        skip[name][coord] = True

    lines = [f"gradcheck dims={dims.B}x{dims.S}x{dims.D}x{dims.V} seed={seed} h={h:g} "
             f"skipped_coords={len(skipped)}"]
    passed = True
    for label, grads, tol in (("eager vs fd", eager_grads, FD_TOL),
                              ("fused vs fd", fused_grads, FD_TOL)):
        worst = 0.0
        for part, name in (("dH", "H"), ("dE", "E"), ("db", "b")):
            keep = ~skip[name]
            dev = np.abs(getattr(grads, part).astype(np.float64) - getattr(fd_grads, part))
            if keep.any():
                worst = max(worst, float(dev[keep].max()))
        ok = worst <= tol
        passed &= ok
        lines.append(f"  {label:<28} max|ddiff|={worst:.3e} (tol {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    passed &= _compare_grads("fused vs eager", eager_grads, fused_grads, BACKWARD_PAIR_TOL, lines)

    lines.append("PASS" if passed else "FAIL")
    return CheckResult(passed=passed, lines=lines)
