"""Analytical slow-memory traffic and peak-activation model per execution strategy.

The model counts the bytes each plan must move *by construction* (what it
reads from and writes to slow memory, stage by stage), not cache-simulated
traffic. All arithmetic is exact integers. Four strategies are modeled:

* ``eager``       - six sequential full-tensor stages over the (B, S, V) logits
* ``compiled``    - GEMM stage plus one fused elementwise/reduction pass; the
                    logit tensor is still materialized and retained
* ``hybrid``      - GEMM per tile, tile written out and re-read for reduction
* ``fully_fused`` - streaming per tile; the logit tensor never exists

The mask is counted at one byte per element; indices at 4 bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .fused import TileConfig
from .tensor import MAX_ADDRESSABLE, Dims

MASK_BYTES = 1

COST_CSV_HEADER = "strategy,stage,bytes_read,bytes_written,peak_activation_bytes,saved_state_bytes"


@dataclass(frozen=True)
class DtypeSpec:
    """Byte widths used by the traffic arithmetic."""

    activation_bytes: int = 2
    index_bytes: int = 4

    def __post_init__(self):
        if self.activation_bytes not in (2, 4):
            raise ValueError(f"activation_bytes must be 2 or 4, got {self.activation_bytes}")
        if self.index_bytes != 4:
            raise ValueError(f"index_bytes must be 4, got {self.index_bytes}")


@dataclass(frozen=True)
class Stage:
    label: str
    bytes_read: int
    bytes_written: int


@dataclass
class CostReport:
    strategy: str
    stages: list[Stage] = field(default_factory=list)
    peak_activation_bytes: int = 0
    saved_state_bytes: int = 0

    @property
    def total_bytes_read(self) -> int:
        return sum(s.bytes_read for s in self.stages)

    @property
    def total_bytes_written(self) -> int:
        return sum(s.bytes_written for s in self.stages)

    def validate(self) -> None:
        for s in self.stages:
            if s.bytes_read < 0 or s.bytes_written < 0:
                raise ValueError(f"negative byte count in stage {s.label}")
        if self.peak_activation_bytes < 0 or self.saved_state_bytes < 0:
            raise ValueError("negative peak or saved-state bytes")


def _checked(n: int) -> int:
    if n > MAX_ADDRESSABLE:
        raise OverflowError(f"byte count {n} exceeds the addressable size")
    return n


def eager_traffic(dims: Dims, dt: DtypeSpec = DtypeSpec()) -> CostReport:
    """Six-stage plan: every elementwise operator re-reads and re-writes the
    full logit tensor, which is also what autograd retains."""
    d, a = dims, dt.activation_bytes
    n_logits = _checked(d.B * d.S * d.V)
    logit_bytes = _checked(n_logits * a)
    stages = [
        Stage("gemm", _checked((d.B * d.S * d.D + d.V * d.D) * a), logit_bytes),
        Stage("bias", _checked(logit_bytes + d.V * a), logit_bytes),
        Stage("mask", _checked(logit_bytes + d.B * d.S * MASK_BYTES), logit_bytes),
        Stage("relu", logit_bytes, logit_bytes),
        Stage("log1p", logit_bytes, logit_bytes),
        Stage("maxreduce", logit_bytes, _checked(d.B * d.V * a)),
    ]
    report = CostReport("eager", stages, peak_activation_bytes=logit_bytes, saved_state_bytes=logit_bytes)
    report.validate()
    return report


def compiled_traffic(dims: Dims, dt: DtypeSpec = DtypeSpec()) -> CostReport:
    """Two-stage plan: the elementwise chain and reduction fuse into one pass,
    but the GEMM stays a black box, so the logit tensor is still written,
    re-read once, and retained for backward."""
    d, a = dims, dt.activation_bytes
    logit_bytes = _checked(d.B * d.S * d.V * a)
    stages = [
        Stage("gemm", _checked((d.B * d.S * d.D + d.V * d.D) * a), logit_bytes),
        Stage(
            "fused-elementwise-reduce",
            _checked(logit_bytes + d.V * a + d.B * d.S * MASK_BYTES),
            _checked(d.B * d.V * a),
        ),
    ]
    report = CostReport("compiled", stages, peak_activation_bytes=logit_bytes, saved_state_bytes=logit_bytes)
    report.validate()
    return report


def fused_traffic(
    dims: Dims,
    dt: DtypeSpec = DtypeSpec(),
    cfg: TileConfig | None = None,
    variant: str = "hybrid",
) -> CostReport:
    """Per-tile plan for the fused head.

    hybrid: each tile's logits are written out once and re-read once for the
    reduction; the transient peak is one (batch_tile, S, vocab_tile) buffer.
    fully_fused: no logit traffic at all; the transient peak is the step
    buffer plus the running max/argmax pair, all (batch_tile, vocab_tile).
    Both retain only (Y, I): B·V·(activation + index) bytes, independent of S.
    """
    if variant not in ("hybrid", "fully_fused"):
        raise ValueError(f"variant must be hybrid or fully_fused, got {variant!r}")
    d, a = dims, dt.activation_bytes
    cfg = cfg or TileConfig.default_for(d)
    cfg.validate_for(d)

    # Tiles come in at most 2x2 size classes (full and remainder along each
    # axis); aggregate by class count so the model stays O(1) in tile count.
    def classes(total: int, tile: int) -> list[tuple[int, int]]:
        full, rem = divmod(total, tile)
        return ([(tile, full)] if full else []) + ([(rem, 1)] if rem else [])

    gemm_read = gemm_write = reduce_read = reduce_write = 0
    for bt, n_bt in classes(d.B, cfg.batch_tile):
        for c, n_c in classes(d.V, cfg.vocab_tile):
            count = n_bt * n_c
            tile_logit_bytes = count * bt * d.S * c * a
            in_bytes = count * (bt * d.S * d.D + c * d.D + c) * a
            out_bytes = count * bt * c * (a + dt.index_bytes)
            mask_bytes = count * bt * d.S * MASK_BYTES
            if variant == "hybrid":
                gemm_read += in_bytes
                gemm_write += tile_logit_bytes
                reduce_read += tile_logit_bytes + mask_bytes
                reduce_write += out_bytes
            else:
                gemm_read += in_bytes + mask_bytes
                reduce_write += out_bytes

    saved = _checked(d.B * d.V * (a + dt.index_bytes))
    if variant == "hybrid":
        stages = [
            Stage("tile-gemm", _checked(gemm_read), _checked(gemm_write)),
            Stage("tile-reduce", _checked(reduce_read), _checked(reduce_write)),
        ]
        peak = _checked(cfg.batch_tile * d.S * cfg.vocab_tile * a)
    else:
        stages = [Stage("stream-fused", _checked(gemm_read), _checked(reduce_write))]
        peak = _checked(cfg.batch_tile * cfg.vocab_tile * (2 * a + dt.index_bytes))
    report = CostReport(variant, stages, peak_activation_bytes=peak, saved_state_bytes=saved)
    report.validate()
    return report


def saved_state_ratio(dims: Dims) -> int:
    """Factor by which the reduced saved state shrinks retained activations:
    (B·S·V) / (B·V) = S."""
    return (dims.B * dims.S * dims.V) // (dims.B * dims.V)


def all_reports(dims: Dims, dt: DtypeSpec = DtypeSpec(), cfg: TileConfig | None = None) -> list[CostReport]:
    return [
        eager_traffic(dims, dt),
        compiled_traffic(dims, dt),
        fused_traffic(dims, dt, cfg, "hybrid"),
        fused_traffic(dims, dt, cfg, "fully_fused"),
    ]


def format_reports(reports: list[CostReport]) -> str:
    """Side-by-side plain-text table of stage traffic, totals, peak and saved bytes."""
    lines = [f"{'strategy':<12} {'stage':<26} {'bytes_read':>16} {'bytes_written':>16}"]
    for rep in reports:
        for i, s in enumerate(rep.stages):
            name = rep.strategy if i == 0 else ""
            lines.append(f"{name:<12} {s.label:<26} {s.bytes_read:>16} {s.bytes_written:>16}")
        lines.append(
            f"{'':<12} {'total':<26} {rep.total_bytes_read:>16} {rep.total_bytes_written:>16}"
        )
        lines.append(
            f"{'':<12} peak_activation={rep.peak_activation_bytes}  saved_state={rep.saved_state_bytes}"
        )
    return "\n".join(lines)


def reports_to_csv_rows(reports: list[CostReport]) -> list[str]:
    """One row per stage plus a total row per strategy; header in COST_CSV_HEADER."""
    rows = []
    for rep in reports:
        for s in rep.stages:
            rows.append(
                f"{rep.strategy},{s.label},{s.bytes_read},{s.bytes_written},"
                f"{rep.peak_activation_bytes},{rep.saved_state_bytes}"
            )
        rows.append(
            f"{rep.strategy},total,{rep.total_bytes_read},{rep.total_bytes_written},"
            f"{rep.peak_activation_bytes},{rep.saved_state_bytes}"
        )
    return rows
