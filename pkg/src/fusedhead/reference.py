"""Eager reference head: the correctness ground truth for the fused variants.

The head projects hidden states onto the vocabulary (H·Eᵀ + b), masks the
raw logits, takes the per-(batch, vocab) maximum over the sequence, and
activates the reduced maxima with log1p∘ReLU. This module materializes the
full (B, S, V) logit tensor on purpose: it is the slow, memory-hungry
baseline, and its dense saved state feeds the eager backward. It also
hosts the float64 brute-force evaluator and the central finite-difference
gradient oracle used to certify every backward implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memtrack import AllocTracker
from .tensor import Constant, Dims, Uniform, matmul_bt, require_finite, seeded_mask, seeded_tensor


@dataclass
class HeadInputs:
    """The head's full input state: hidden states, embeddings, bias, mask."""

    dims: Dims
    H: np.ndarray  # (B, S, D) float32
    E: np.ndarray  # (V, D) float32
    b: np.ndarray  # (V,) float32
    mask: np.ndarray  # (B, S) uint8, values in {0, 1}

    def validate(self) -> None:
        d = self.dims
        if self.H.shape != (d.B, d.S, d.D) or self.H.dtype != np.float32:
            raise ValueError(f"H must be float32 {(d.B, d.S, d.D)}, got {self.H.dtype} {self.H.shape}")
        if self.E.shape != (d.V, d.D) or self.E.dtype != np.float32:
            raise ValueError(f"E must be float32 {(d.V, d.D)}, got {self.E.dtype} {self.E.shape}")
        if self.b.shape != (d.V,) or self.b.dtype != np.float32:
            raise ValueError(f"b must be float32 {(d.V,)}, got {self.b.dtype} {self.b.shape}")
        if self.mask.shape != (d.B, d.S) or self.mask.dtype != np.uint8:
            raise ValueError(f"mask must be uint8 {(d.B, d.S)}, got {self.mask.dtype} {self.mask.shape}")
        require_finite(self.H, "H")
        require_finite(self.E, "E")
        require_finite(self.b, "b")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask values must be exactly 0 or 1")

    @classmethod
    def seeded(
        cls,
        dims: Dims,
        seed: int,
        *,
        mask: np.ndarray | None = None,
        mask_keep: float = 1.0,
        dist: Uniform | Constant = Uniform(-1.0, 1.0),
    ) -> "HeadInputs":
        """Deterministic random instance; H/E/b use seed, seed+1, seed+2."""
        if mask is None:
            mask = seeded_mask(dims.B, dims.S, seed + 3, keep=mask_keep)
        inputs = cls(
            dims=dims,
            H=seeded_tensor((dims.B, dims.S, dims.D), seed, dist),
            E=seeded_tensor((dims.V, dims.D), seed + 1, dist),
            b=seeded_tensor((dims.V,), seed + 2, dist),
            mask=np.ascontiguousarray(mask, dtype=np.uint8),
        )
        inputs.validate()
        return inputs


@dataclass
class HeadOutput:
    """Reduced scores Y (B, V) float32, each >= 0, and argmax indices I (B, V) int32."""

    Y: np.ndarray
    I: np.ndarray


@dataclass
class HeadGradients:
    """Gradients with respect to H, E and b; shapes mirror the inputs."""

    dH: np.ndarray
    dE: np.ndarray
    db: np.ndarray


@dataclass
class SavedDenseState:
    """Masked raw logits (B, S, V) retained by the eager forward for its backward."""

    L: np.ndarray


def _reduce_masked_logits(L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Canonical argmax: numpy's argmax keeps the smallest index on ties.
    idx = np.argmax(L, axis=1).astype(np.int32)
    raw = np.take_along_axis(L, idx[:, None, :], axis=1)[:, 0, :]
    return np.log1p(np.maximum(raw, np.float32(0))), idx


def forward_eager(
    inputs: HeadInputs,
    *,
    deterministic: bool = False,
    tracker: AllocTracker | None = None,
) -> tuple[HeadOutput, SavedDenseState]:
    """Standard eager forward: materialize masked logits, then reduce and activate.

    Masking multiplies the raw biased logits, so masked positions hold an
    exact zero. The activation is applied once, after the reduction; the
    monotonicity of log1p∘ReLU makes this identical to activating the full
    tensor first.
    """
    inputs.validate()
    tracker = tracker or AllocTracker()
    d = inputs.dims
    flat = tracker.allocate((d.B * d.S, d.V), zero=False)
    matmul_bt(inputs.H.reshape(d.B * d.S, d.D), inputs.E, inputs.b, flat, deterministic=deterministic)
    L = flat.reshape(d.B, d.S, d.V)
    L *= inputs.mask[:, :, None]
    Y, idx = _reduce_masked_logits(L)
    tracker.note_saved(L.nbytes)
    return HeadOutput(Y=Y, I=idx), SavedDenseState(L=L)


def forward_activate_then_mask(inputs: HeadInputs, *, deterministic: bool = False) -> np.ndarray:
    """Activate the unmasked logits first, mask the activations, then reduce.

    This is the textbook ordering of the head. It exists only to certify
    that it produces the same Y as `forward_eager`'s raw-logit masking.
    """
    inputs.validate()
    d = inputs.dims
    flat = np.empty((d.B * d.S, d.V), np.float32)
    matmul_bt(inputs.H.reshape(d.B * d.S, d.D), inputs.E, inputs.b, flat, deterministic=deterministic)
    act = np.log1p(np.maximum(flat.reshape(d.B, d.S, d.V), np.float32(0)))
    act *= inputs.mask[:, :, None]
    return act.max(axis=1)


def backward_eager(
    inputs: HeadInputs,
    saved: SavedDenseState,
    out: HeadOutput,
    dY: np.ndarray,
    *,
    include_bias_grad: bool = True,
) -> HeadGradients:
    """Dense-state backward: route each (b, v) gradient through its argmax position.

    For pairs whose masked max logit is positive, g = dY / (1 + rawmax);
    pairs at or below zero contribute nothing (the subgradient at the ReLU
    kink is taken as zero). Mismatched saved state is detected by shape only.
    """
    d = inputs.dims
    if inputs.H.shape != (d.B, d.S, d.D) or inputs.E.shape != (d.V, d.D):
        raise ValueError("input shapes disagree with dims")
    if saved.L.shape != (d.B, d.S, d.V):
        raise ValueError(f"saved logits must be {(d.B, d.S, d.V)}, got {saved.L.shape}")
    if out.I.shape != (d.B, d.V) or dY.shape != (d.B, d.V):
        raise ValueError("output indices and dY must both have shape (B, V)")

    raw = np.take_along_axis(saved.L, out.I[:, None, :], axis=1)[:, 0, :]
    pos = raw > 0
    g = np.zeros((d.B, d.V), np.float32)
    g[pos] = dY[pos] / (np.float32(1) + raw[pos])

    dH = np.zeros_like(inputs.H)
    dE = np.zeros_like(inputs.E)
    db = np.zeros_like(inputs.b)
    for b in range(d.B):
        vs = np.nonzero(pos[b])[0]
        if vs.size == 0:
            continue
        idx = out.I[b, vs]
        gv = g[b, vs]
        dE[vs] += gv[:, None] * inputs.H[b, idx, :]
        if include_bias_grad:
            db[vs] += gv
        np.add.at(dH[b], idx, gv[:, None] * inputs.E[vs, :])
    return HeadGradients(dH=dH, dE=dE, db=db)


def eval_head_f64(
    H: np.ndarray, E: np.ndarray, b: np.ndarray, mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Direct float64 evaluation of the head, used as the numeric oracle.

    Independent of `matmul_bt` and of every production forward path.
    """
    L = np.einsum("bsd,vd->bsv", H.astype(np.float64), E.astype(np.float64))
    L += b.astype(np.float64)[None, None, :]
    L *= mask[:, :, None]
    idx = np.argmax(L, axis=1)
    raw = np.take_along_axis(L, idx[:, None, :], axis=1)[:, 0, :]
    return np.log1p(np.maximum(raw, 0.0)), idx.astype(np.int32)


def _argmax_stable(base_Y, base_I, pert_Y, pert_I) -> bool:
    # A perturbation invalidates a coordinate if it changes which pairs are
    # active (raw max crossing the ReLU kink) or moves any active argmax.
    pos = base_Y > 0
    if not np.array_equal(pos, pert_Y > 0):
        return False
    return np.array_equal(base_I[pos], pert_I[pos])


def finite_difference_grads(
    inputs: HeadInputs,
    dY: np.ndarray,
    h: float = 1e-3,
) -> tuple[HeadGradients, list[tuple[str, tuple[int, ...]]]]:
    """Central differences of the scalar loss <Y, dY> in float64.

    Each coordinate of H, E and b is perturbed one at a time. Coordinates
    whose perturbation flips an argmax or the set of active (b, v) pairs
    are unreliable at the kink; their gradient entries are left at zero and
    reported in the returned skip list instead of being compared.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    inputs.validate()
    dY64 = dY.astype(np.float64)
    tensors = {
        "H": inputs.H.astype(np.float64),
        "E": inputs.E.astype(np.float64),
        "b": inputs.b.astype(np.float64),
    }
    base_Y, base_I = eval_head_f64(tensors["H"], tensors["E"], tensors["b"], inputs.mask)
    grads = {name: np.zeros_like(arr) for name, arr in tensors.items()}
    skipped: list[tuple[str, tuple[int, ...]]] = []

    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        grad_flat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            y_plus, i_plus = eval_head_f64(tensors["H"], tensors["E"], tensors["b"], inputs.mask)
            flat[i] = orig - h
            y_minus, i_minus = eval_head_f64(tensors["H"], tensors["E"], tensors["b"], inputs.mask)
            flat[i] = orig
            if not (_argmax_stable(base_Y, base_I, y_plus, i_plus)
                    and _argmax_stable(base_Y, base_I, y_minus, i_minus)):
                skipped.append((name, np.unravel_index(i, arr.shape)))
                continue
            grad_flat[i] = float(np.sum((y_plus - y_minus) * dY64)) / (2.0 * h)

    return HeadGradients(dH=grads["H"], dE=grads["E"], db=grads["b"]), skipped
