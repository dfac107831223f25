"""Fused head: tiled forward, streaming forward, and the argmax-routed backward.

Both forward variants walk (batch-range x vocab-range) tiles and never
materialize the full (B, S, V) logit tensor:

* the hybrid variant runs one GEMM per tile into a transient
  (batch_tile, S, vocab_tile) buffer and immediately reduces it with a
  masked max + canonical argmax, activating only the reduced maxima;
* the fully fused variant streams the reduction, updating running maxima
  and running argmax one sequence position at a time, so its transient
  working set is (batch_tile, vocab_tile) and independent of S.

The only state kept for the backward pass is the (Y, I) output pair,
O(B·V) bytes. The backward routes each active (b, v) gradient to the
single hidden-state row that won the max, touching no other rows of H.

In deterministic mode the logit of every (b, s, v) element is accumulated
in a fixed scalar order independent of tiling, so the two fused variants
and the eager reference agree bit for bit, for any tile shape and any
thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .memtrack import AllocTracker
from .reference import HeadGradients, HeadInputs, HeadOutput
from .tensor import Dims, matmul_bt

_TILE_BUFFER_BUDGET = 1 << 20  # default heuristic: hybrid tile buffer <= 1 MiB


@dataclass(frozen=True)
class TileConfig:
    """Tiling and execution policy shared by the fused forward and backward."""

    vocab_tile: int
    batch_tile: int
    deterministic: bool = False
    num_threads: int = 1

    def validate_for(self, dims: Dims) -> None:
        if not 1 <= self.vocab_tile <= dims.V:
            raise ValueError(f"vocab_tile must lie in [1, {dims.V}], got {self.vocab_tile}")
        if not 1 <= self.batch_tile <= dims.B:
            raise ValueError(f"batch_tile must lie in [1, {dims.B}], got {self.batch_tile}")
        if self.num_threads < 1:
            raise ValueError(f"num_threads must be positive, got {self.num_threads}")

    @classmethod
    def default_for(cls, dims: Dims, *, deterministic: bool = False, num_threads: int = 1) -> "TileConfig":
        """Static default: vocab_tile 64, batch_tile min(B, 8), shrunk (batch
        tile first, then vocab tile) until the hybrid tile buffer fits 1 MiB."""
        c = min(64, dims.V)
        bt = min(8, dims.B)
        while bt > 1 and bt * dims.S * c * 4 > _TILE_BUFFER_BUDGET:
            bt //= 2
        while c > 1 and bt * dims.S * c * 4 > _TILE_BUFFER_BUDGET:
            c //= 2
        return cls(vocab_tile=c, batch_tile=bt, deterministic=deterministic, num_threads=num_threads)


@dataclass
class SavedSparseState:
    """Reduced forward state (Y, I): O(B·V) bytes, independent of S."""

    Y: np.ndarray
    I: np.ndarray

    @classmethod
    def from_output(cls, out: HeadOutput) -> "SavedSparseState":
        return cls(Y=out.Y, I=out.I)

    @property
    def nbytes(self) -> int:
        return self.Y.nbytes + self.I.nbytes


Tile = tuple[tuple[int, int], tuple[int, int]]


def tile_schedule(dims: Dims, cfg: TileConfig) -> list[Tile]:
    """Exact partition of [0, B) x [0, V) into (batch_range, vocab_range) tiles,
    ordered batch-major then vocab."""
    cfg.validate_for(dims)
    tiles: list[Tile] = []
    for b0 in range(0, dims.B, cfg.batch_tile):
        b1 = min(b0 + cfg.batch_tile, dims.B)
        for v0 in range(0, dims.V, cfg.vocab_tile):
            v1 = min(v0 + cfg.vocab_tile, dims.V)
            tiles.append(((b0, b1), (v0, v1)))
    return tiles


def _run_tiles(items, worker, num_threads: int) -> None:
    # Workers own disjoint output regions, so no synchronization is needed;
    # results are identical for any thread count.
    if num_threads <= 1 or len(items) <= 1:
        for item in items:
            worker(item)
        return
    with ThreadPoolExecutor(max_workers=num_threads) as pool:
        for future in [pool.submit(worker, item) for item in items]:
            future.result()


def _activate(raw: np.ndarray) -> np.ndarray:
    return np.log1p(np.maximum(raw, np.float32(0)))


def forward_hybrid(
    inputs: HeadInputs,
    cfg: TileConfig | None = None,
    tracker: AllocTracker | None = None,
) -> HeadOutput:
    """GEMM per vocab tile, immediate masked max-reduction, activation on the maxima.

    One transient tile buffer is live per worker; output matches
    `forward_eager` (bit for bit in deterministic mode).
    """
    inputs.validate()
    d = inputs.dims
    cfg = cfg or TileConfig.default_for(d)
    cfg.validate_for(d)
    tracker = tracker or AllocTracker()

    Y = np.empty((d.B, d.V), np.float32)
    I = np.empty((d.B, d.V), np.int32)

    def worker(tile: Tile) -> None:
        (b0, b1), (v0, v1) = tile
        bt, c = b1 - b0, v1 - v0
        buf = tracker.allocate((bt * d.S, c), zero=False)
        try:
            matmul_bt(
                inputs.H[b0:b1].reshape(bt * d.S, d.D),
                inputs.E[v0:v1],
                inputs.b[v0:v1],
                buf,
                deterministic=cfg.deterministic,
            )
            logits = buf.reshape(bt, d.S, c)
            logits *= inputs.mask[b0:b1, :, None]
            idx = np.argmax(logits, axis=1).astype(np.int32)
            raw = np.take_along_axis(logits, idx[:, None, :], axis=1)[:, 0, :]
            Y[b0:b1, v0:v1] = _activate(raw)
            I[b0:b1, v0:v1] = idx
        finally:
            tracker.release(buf)

    _run_tiles(tile_schedule(d, cfg), worker, cfg.num_threads)
    tracker.note_saved(Y.nbytes + I.nbytes)
    return HeadOutput(Y=Y, I=I)


def forward_fully_fused(
    inputs: HeadInputs,
    cfg: TileConfig | None = None,
    tracker: AllocTracker | None = None,
) -> HeadOutput:
    """Streaming forward: running maxima and argmax are updated per sequence
    position as the dot products are produced.

    The transient working set per worker is three (batch_tile, vocab_tile)
    buffers (step logits, running maxima, running argmax) regardless of S.
    """
    inputs.validate()
    d = inputs.dims
    cfg = cfg or TileConfig.default_for(d)
    cfg.validate_for(d)
    tracker = tracker or AllocTracker()

    Y = np.empty((d.B, d.V), np.float32)
    I = np.empty((d.B, d.V), np.int32)

    def worker(tile: Tile) -> None:
        (b0, b1), (v0, v1) = tile
        bt, c = b1 - b0, v1 - v0
        e_tile = inputs.E[v0:v1]
        b_tile = inputs.b[v0:v1]
        run_max = tracker.allocate((bt, c), zero=False)
        run_arg = tracker.allocate((bt, c), np.int32)
        step = tracker.allocate((bt, c), zero=False)
        try:
            run_max.fill(-np.inf)
            for s in range(d.S):
                h_s = inputs.H[b0:b1, s, :]
                if cfg.deterministic:
                    step[...] = 0.0
                    for k in range(d.D):
                        step += h_s[:, k, None] * e_tile[None, :, k]
                else:
                    np.matmul(h_s, e_tile.T, out=step)
                step += b_tile
                step *= inputs.mask[b0:b1, s, None]
                upd = step > run_max  # strict: earliest position wins ties
                np.copyto(run_max, step, where=upd)
                np.copyto(run_arg, np.int32(s), where=upd)
            Y[b0:b1, v0:v1] = _activate(run_max)
            I[b0:b1, v0:v1] = run_arg
        finally:
            tracker.release(step)
            tracker.release(run_arg)
            tracker.release(run_max)

    _run_tiles(tile_schedule(d, cfg), worker, cfg.num_threads)
    tracker.note_saved(Y.nbytes + I.nbytes)
    return HeadOutput(Y=Y, I=I)


def backward_fused(
    inputs: HeadInputs,
    saved: SavedSparseState,
    dY: np.ndarray,
    cfg: TileConfig | None = None,
    *,
    include_bias_grad: bool = True,
) -> HeadGradients:
    """Sparse backward from (Y, I) only: g = dY·exp(-Y) for active pairs.

    Because Y = log1p(rawmax) on active pairs, exp(-Y) equals
    1 / (1 + rawmax), so no logits are read or recomputed. Only the H rows
    at the saved argmax indices of active pairs are touched. dE/db are
    partitioned by vocab block and dH by batch row, each location having a
    single owner accumulating in a fixed order, so results are bit-identical
    for any thread count.

    Saved-state/input mismatch is detected by shape only; feeding state from
    a different forward run is the caller's responsibility. Input values are
    not re-validated here, which also lets tests poison never-read H rows to
    certify the access pattern.
    """
    d = inputs.dims
    cfg = cfg or TileConfig.default_for(d)
    cfg.validate_for(d)
    if inputs.H.shape != (d.B, d.S, d.D) or inputs.E.shape != (d.V, d.D):
        raise ValueError("input shapes disagree with dims")
    if saved.Y.shape != (d.B, d.V) or saved.I.shape != (d.B, d.V):
        raise ValueError(f"saved state must have shape {(d.B, d.V)}")
    if dY.shape != (d.B, d.V):
        raise ValueError(f"dY must have shape {(d.B, d.V)}, got {dY.shape}")

    pos = saved.Y > 0
    g = np.zeros((d.B, d.V), np.float32)
    g[pos] = dY[pos] * np.exp(-saved.Y[pos])

    dH = np.zeros_like(inputs.H)
    dE = np.zeros_like(inputs.E)
    db = np.zeros_like(inputs.b)

    def embed_block(block: tuple[int, int]) -> None:
        v0, v1 = block
        for b in range(d.B):
            local = np.nonzero(pos[b, v0:v1])[0]
            if local.size == 0:
                continue
            vs = local + v0
            gv = g[b, vs]
            dE[vs] += gv[:, None] * inputs.H[b, saved.I[b, vs], :]
            if include_bias_grad:
                db[vs] += gv

    def hidden_row(b: int) -> None:
        vs = np.nonzero(pos[b])[0]
        if vs.size == 0:
            return
        gv = g[b, vs]
        # ufunc.at applies updates sequentially in ascending vocab order.
        np.add.at(dH[b], saved.I[b, vs], gv[:, None] * inputs.E[vs, :])

    blocks = [(v0, min(v0 + cfg.vocab_tile, d.V)) for v0 in range(0, d.V, cfg.vocab_tile)]
    _run_tiles(blocks, embed_block, cfg.num_threads)
    _run_tiles(list(range(d.B)), hidden_row, cfg.num_threads)
    return HeadGradients(dH=dH, dE=dE, db=db)
