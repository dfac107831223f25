"""Fused max-pooled vocabulary head with an eager oracle, gradient checker,
memory-traffic cost model, and benchmark CLI."""

from .bench import (
    BENCH_CSV_HEADER,
    BenchRecord,
    STRATEGY_NAMES,
    SweepSpec,
    records_to_csv,
    run_check,
    run_gradcheck,
    run_sweep,
    y_checksum,
)
from .costmodel import (
    COST_CSV_HEADER,
    CostReport,
    DtypeSpec,
    Stage,
    all_reports,
    compiled_traffic,
    eager_traffic,
    format_reports,
    fused_traffic,
    saved_state_ratio,
)
from .fused import (
    SavedSparseState,
    TileConfig,
    backward_fused,
    forward_fully_fused,
    forward_hybrid,
    tile_schedule,
)
from .memtrack import AllocationCapExceeded, AllocTracker
from .reference import (
    HeadGradients,
    HeadInputs,
    HeadOutput,
    SavedDenseState,
    backward_eager,
    eval_head_f64,
    finite_difference_grads,
    forward_eager,
    forward_activate_then_mask,
)
from .tensor import Constant, Dims, Uniform, matmul_bt, seeded_mask, seeded_tensor, splitmix64

__version__ = "0.1.0"

__all__ = [
    "AllocTracker",
    "AllocationCapExceeded",
    "BENCH_CSV_HEADER",
    "BenchRecord",
    "COST_CSV_HEADER",
    "Constant",
    "CostReport",
    "Dims",
    "DtypeSpec",
    "HeadGradients",
    "HeadInputs",
    "HeadOutput",
    "STRATEGY_NAMES",
    "SavedDenseState",
    "SavedSparseState",
    "Stage",
    "SweepSpec",
    "TileConfig",
    "Uniform",
    "all_reports",
    "backward_eager",
    "backward_fused",
    "compiled_traffic",
    "eager_traffic",
    "eval_head_f64",
    "finite_difference_grads",
    "format_reports",
    "forward_eager",
    "forward_activate_then_mask",
    "forward_fully_fused",
    "forward_hybrid",
    "fused_traffic",
    "matmul_bt",
    "records_to_csv",
    "run_check",
    "run_gradcheck",
    "run_sweep",
    "saved_state_ratio",
    "seeded_mask",
    "seeded_tensor",
    "splitmix64",
    "tile_schedule",
    "y_checksum",
]
