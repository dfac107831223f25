"""Tests for the tiled and streaming fused forwards and the sparse backward."""

import numpy as np
import pytest

from fusedhead import (
    AllocTracker,
    Dims,
    HeadInputs,
    SavedSparseState,
    TileConfig,
    Uniform,
    backward_eager,
    backward_fused,
    finite_difference_grads,
    forward_eager,
    forward_fully_fused,
    forward_hybrid,
    seeded_tensor,
    tile_schedule,
)


class TestTileConfig:
    def test_validation(self):
        dims = Dims(2, 3, 4, 5)
        with pytest.raises(ValueError):
            TileConfig(0, 1).validate_for(dims)
        with pytest.raises(ValueError):
            TileConfig(6, 1).validate_for(dims)
        with pytest.raises(ValueError):
            TileConfig(1, 3).validate_for(dims)
        with pytest.raises(ValueError):
            TileConfig(1, 1, num_threads=0).validate_for(dims)

    def test_default_respects_buffer_budget(self):
        cfg = TileConfig.default_for(Dims(16, 4096, 8, 1024))
        assert cfg.batch_tile * 4096 * cfg.vocab_tile * 4 <= 1 << 20

    def test_default_clamps_to_dims(self):
        cfg = TileConfig.default_for(Dims(2, 3, 4, 5))
        assert cfg.vocab_tile == 5 and cfg.batch_tile == 2


class TestTileSchedule:
    def test_single_tile(self):
        tiles = tile_schedule(Dims(4, 2, 2, 8), TileConfig(8, 4))
        assert tiles == [((0, 4), (0, 8))]

    def test_remainder_tiles(self):
        tiles = tile_schedule(Dims(4, 2, 2, 10), TileConfig(4, 2))
        assert len(tiles) == 6
        assert tiles[-1] == ((2, 4), (8, 10))

    @pytest.mark.parametrize("cfg", [(1, 1), (3, 2), (7, 4), (16, 4)])
    def test_exact_partition(self, cfg):
        dims = Dims(4, 2, 2, 16)
        c, bt = cfg
        covered = np.zeros((dims.B, dims.V), np.int32)
        for (b0, b1), (v0, v1) in tile_schedule(dims, TileConfig(c, bt)):
            covered[b0:b1, v0:v1] += 1
        assert np.all(covered == 1)


class TestForwardHybrid:
    def test_single_tile_matches_eager(self, small_instance):
        ref, _ = forward_eager(small_instance, deterministic=True)
        got = forward_hybrid(small_instance, TileConfig(5, 2, deterministic=True))
        assert got.Y.tobytes() == ref.Y.tobytes()
        assert np.array_equal(got.I, ref.I)

    def test_small_tiles_match_eager(self, small_instance):
        ref, _ = forward_eager(small_instance, deterministic=True)
        got = forward_hybrid(small_instance, TileConfig(2, 1, deterministic=True))
        assert np.max(np.abs(got.Y - ref.Y)) < 1e-6
        pos = ref.Y > 0
        assert np.array_equal(got.I[pos], ref.I[pos])

    def test_all_masked_row(self):
        dims = Dims(2, 3, 4, 5)
        mask = np.ones((2, 3), np.uint8)
        mask[0] = 0
        inputs = HeadInputs.seeded(dims, 8, mask=mask)
        out = forward_hybrid(inputs, TileConfig(2, 1))
        assert np.all(out.Y[0] == 0) and np.all(out.I[0] == 0)

    def test_fast_mode_tolerance(self):
        inputs = HeadInputs.seeded(Dims(4, 8, 8, 33), 17, mask_keep=0.8)
        ref, _ = forward_eager(inputs)
        got = forward_hybrid(inputs, TileConfig(5, 3))
        tol = np.maximum(1e-7, 1e-5 * np.abs(ref.Y))
        assert np.all(np.abs(got.Y - ref.Y) <= tol)


class TestForwardFullyFused:
    def test_seq_one_matches_hybrid(self):
        inputs = HeadInputs.seeded(Dims(3, 1, 4, 7), 6)
        cfg = TileConfig(3, 2, deterministic=True)
        a = forward_hybrid(inputs, cfg)
        b = forward_fully_fused(inputs, cfg)
        assert a.Y.tobytes() == b.Y.tobytes()
        assert np.array_equal(a.I, b.I)

    def test_matches_eager(self, small_instance):
        ref, _ = forward_eager(small_instance, deterministic=True)
        got = forward_fully_fused(small_instance, TileConfig(2, 1, deterministic=True))
        assert np.max(np.abs(got.Y - ref.Y)) < 1e-6
        pos = ref.Y > 0
        assert np.array_equal(got.I[pos], ref.I[pos])

    def test_transient_peak_independent_of_seq_len(self):
        peaks = []
        for s in (8, 64):
            inputs = HeadInputs.seeded(Dims(4, s, 16, 256), 3)
            tracker = AllocTracker()
            forward_fully_fused(inputs, TileConfig(64, 4), tracker)
            peaks.append(tracker.peak_bytes)
        assert peaks[0] == peaks[1]

    def test_hybrid_transient_peak_is_tile_buffer(self):
        inputs = HeadInputs.seeded(Dims(4, 16, 8, 64), 3)
        tracker = AllocTracker()
        forward_hybrid(inputs, TileConfig(16, 2), tracker)
        assert tracker.peak_bytes == 2 * 16 * 16 * 4


class TestTilingInvariance:
    CONFIGS = [(1, 1), (2, 1), (5, 2), (3, 2), (5, 1)]

    def test_bit_exact_in_deterministic_mode(self, small_instance):
        ref, _ = forward_eager(small_instance, deterministic=True)
        for c, bt in self.CONFIGS:
            cfg = TileConfig(c, bt, deterministic=True)
            for fwd in (forward_hybrid, forward_fully_fused):
                got = fwd(small_instance, cfg)
                assert got.Y.tobytes() == ref.Y.tobytes(), (fwd.__name__, c, bt)
                assert np.array_equal(got.I, ref.I), (fwd.__name__, c, bt)

    def test_within_tolerance_in_fast_mode(self, small_instance):
        ref, _ = forward_eager(small_instance)
        outputs = []
        for c, bt in self.CONFIGS:
            cfg = TileConfig(c, bt)
            for fwd in (forward_hybrid, forward_fully_fused):
                got = fwd(small_instance, cfg)
                assert np.max(np.abs(got.Y - ref.Y)) < 1e-6
                outputs.append(got.Y)
        # Output independent of the tiling itself, not just close to eager.
        for other in outputs[1:]:
            assert np.max(np.abs(other - outputs[0])) < 1e-6


class TestSavedState:
    def test_saved_bytes_exact_and_seq_independent(self):
        for s in (8, 64):
            dims = Dims(4, s, 16, 256)
            inputs = HeadInputs.seeded(dims, 2)
            tracker = AllocTracker()
            out = forward_fully_fused(inputs, TileConfig(64, 4), tracker)
            assert tracker.saved_bytes == dims.B * dims.V * (4 + 4)
            assert SavedSparseState.from_output(out).nbytes == tracker.saved_bytes


class TestBackwardFused:
    def test_zero_upstream_gradient(self, small_instance):
        out = forward_hybrid(small_instance)
        g = backward_fused(small_instance, SavedSparseState.from_output(out),
                           np.zeros((2, 5), np.float32))
        assert not g.dH.any() and not g.dE.any() and not g.db.any()

    def test_scalar_matches_eager_closed_form(self):
        x, w = 0.7, 0.9
        dims = Dims(1, 1, 1, 1)
        inputs = HeadInputs(dims, np.full((1, 1, 1), x, np.float32),
                            np.full((1, 1), w, np.float32), np.zeros(1, np.float32),
                            np.ones((1, 1), np.uint8))
        dY = np.ones((1, 1), np.float32)
        out, saved = forward_eager(inputs)
        ge = backward_eager(inputs, saved, out, dY)
        gf = backward_fused(inputs, SavedSparseState.from_output(out), dY)
        assert gf.dH[0, 0, 0] == pytest.approx(ge.dH[0, 0, 0], abs=1e-7)
        assert gf.dE[0, 0] == pytest.approx(ge.dE[0, 0], abs=1e-7)
        assert gf.db[0] == pytest.approx(ge.db[0], abs=1e-7)

    def test_matches_both_oracles(self, small_instance):
        dY = seeded_tensor((2, 5), 9)
        out, saved = forward_eager(small_instance, deterministic=True)
        ge = backward_eager(small_instance, saved, out, dY)
        gf = backward_fused(small_instance, SavedSparseState.from_output(out), dY,
                            TileConfig(2, 1, deterministic=True))
        for got, ref in ((gf.dH, ge.dH), (gf.dE, ge.dE), (gf.db, ge.db)):
            assert np.max(np.abs(got - ref)) < 1e-5
        fd, _ = finite_difference_grads(small_instance, dY)
        for got, ref in ((gf.dH, fd.dH), (gf.dE, fd.dE), (gf.db, fd.db)):
            assert np.max(np.abs(got - ref)) < 1e-4

    def test_reads_only_active_argmax_rows(self):
        # Poison every H row that is not the argmax of an active pair; the
        # backward must not observe the poison in any gradient.
        dims = Dims(2, 6, 3, 8)
        inputs = HeadInputs.seeded(dims, 31, mask_keep=0.7)
        dY = seeded_tensor((2, 8), 32)
        out = forward_hybrid(inputs, TileConfig(3, 1, deterministic=True))
        saved = SavedSparseState.from_output(out)
        clean = backward_fused(inputs, saved, dY)

        needed = set()
        pos = out.Y > 0
        for b in range(dims.B):
            for v in np.nonzero(pos[b])[0]:
                needed.add((b, int(out.I[b, v])))
        poisoned = HeadInputs(dims, inputs.H.copy(), inputs.E, inputs.b, inputs.mask)
        touched_any = False
        for b in range(dims.B):
            for s in range(dims.S):
                if (b, s) not in needed:
                    poisoned.H[b, s, :] = np.nan
                    touched_any = True
        assert touched_any
        dirty = backward_fused(poisoned, saved, dY)
        assert np.array_equal(clean.dE, dirty.dE)
        assert np.array_equal(clean.db, dirty.db)
        for b in range(dims.B):
            for s in range(dims.S):
                if (b, s) not in needed:
                    assert not dirty.dH[b, s, :].any()

    def test_exp_neg_y_identity(self, small_instance):
        out, saved = forward_eager(small_instance)
        pos = out.Y > 0
        raw = np.take_along_axis(saved.L, out.I[:, None, :], axis=1)[:, 0, :]
        ident = np.exp(-out.Y.astype(np.float64)[pos]) * (1.0 + raw.astype(np.float64)[pos])
        assert np.max(np.abs(ident - 1.0)) < 1e-5
        recovered = np.expm1(out.Y.astype(np.float64)[pos])
        assert np.max(np.abs(recovered - raw.astype(np.float64)[pos])) < 1e-5

    def test_bias_grad_can_be_disabled(self, small_instance):
        out = forward_hybrid(small_instance)
        dY = seeded_tensor((2, 5), 9)
        g = backward_fused(small_instance, SavedSparseState.from_output(out), dY,
                           include_bias_grad=False)
        assert not g.db.any() and g.dE.any()

    def test_shape_mismatch_rejected(self, small_instance):
        out = forward_hybrid(small_instance)
        saved = SavedSparseState(out.Y[:, :3], out.I[:, :3])
        with pytest.raises(ValueError):
            backward_fused(small_instance, saved, np.zeros((2, 5), np.float32))


class TestOracleEquivalenceGrid:
    @pytest.mark.parametrize("seed,dims", [
        (0, (1, 1, 2, 1)), (1, (2, 3, 4, 5)), (2, (4, 8, 2, 16)),
        (3, (1, 32, 16, 5)), (4, (2, 8, 4, 64)), (5, (4, 3, 16, 16)),
    ])
    def test_forwards_and_backward_agree(self, seed, dims):
        dims = Dims(*dims)
        inputs = HeadInputs.seeded(dims, 700 + seed, mask_keep=0.8)
        dY = seeded_tensor((dims.B, dims.V), 800 + seed)
        ref, saved = forward_eager(inputs, deterministic=True)
        ge = backward_eager(inputs, saved, ref, dY)
        default = TileConfig.default_for(dims)
        configs = {(1, 1), (dims.V, dims.B), (default.vocab_tile, default.batch_tile)}
        for c, bt in sorted(configs):
            cfg = TileConfig(c, bt, deterministic=True)
            for fwd in (forward_hybrid, forward_fully_fused):
                got = fwd(inputs, cfg)
                tol = np.maximum(1e-7, 1e-5 * np.abs(ref.Y))
                assert np.all(np.abs(got.Y - ref.Y) <= tol)
                pos = ref.Y > 0
                assert np.array_equal(got.I[pos], ref.I[pos])
            gf = backward_fused(inputs, SavedSparseState.from_output(ref), dY, cfg)
            for got, want in ((gf.dH, ge.dH), (gf.dE, ge.dE), (gf.db, ge.db)):
                assert np.max(np.abs(got - want)) < 1e-5


class TestRobustness:
    def test_outputs_finite_for_bounded_inputs(self):
        dims = Dims(3, 6, 5, 9)
        inputs = HeadInputs.seeded(dims, 77, mask_keep=0.8, dist=Uniform(-10, 10))
        dY = seeded_tensor((dims.B, dims.V), 78, Uniform(-10, 10))
        for fwd in (forward_hybrid, forward_fully_fused):
            out = fwd(inputs, TileConfig(4, 2))
            assert np.isfinite(out.Y).all()
            grads = backward_fused(inputs, SavedSparseState.from_output(out), dY)
            for part in (grads.dH, grads.dE, grads.db):
                assert np.isfinite(part).all()

    def test_concurrent_invocations_on_distinct_inputs(self):
        # The operator holds no shared mutable state; concurrent calls on
        # distinct inputs must match serial results exactly.
        from concurrent.futures import ThreadPoolExecutor

        dims = Dims(2, 4, 3, 8)
        jobs = [HeadInputs.seeded(dims, 900 + i, mask_keep=0.8) for i in range(8)]
        cfg = TileConfig(3, 1, deterministic=True)
        serial = [forward_hybrid(inp, cfg) for inp in jobs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(lambda inp: forward_hybrid(inp, cfg), jobs))
        for a, b in zip(serial, parallel):
            assert a.Y.tobytes() == b.Y.tobytes()
            assert np.array_equal(a.I, b.I)


class TestDeterminismAcrossThreads:
    def test_forward_and_backward_bit_identical(self):
        dims = Dims(4, 8, 8, 32)
        inputs = HeadInputs.seeded(dims, 55, mask_keep=0.9)
        dY = seeded_tensor((dims.B, dims.V), 56)
        baselines = None
        for threads in (1, 2, 4):
            cfg = TileConfig(8, 2, deterministic=True, num_threads=threads)
            out_h = forward_hybrid(inputs, cfg)
            out_f = forward_fully_fused(inputs, cfg)
            grads = backward_fused(inputs, SavedSparseState.from_output(out_h), dY, cfg)
            blob = (out_h.Y.tobytes(), out_h.I.tobytes(), out_f.Y.tobytes(),
                    out_f.I.tobytes(), grads.dH.tobytes(), grads.dE.tobytes(),
                    grads.db.tobytes())
            if baselines is None:
                baselines = blob
            else:
                assert blob == baselines, f"threads={threads} diverged"
