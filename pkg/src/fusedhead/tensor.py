"""Dense float32 tensor primitives: seeded initialization and a blocked A·Bᵀ matmul.

All tensors in this package are C-contiguous float32 ndarrays; attention
masks are {0,1}-valued uint8 ndarrays. Random initialization is backed by
SplitMix64 so that seeded tensors are byte-identical on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# Shape and byte products must stay addressable on 64-bit platforms.
MAX_ADDRESSABLE = 2**63 - 1

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class Dims:
    """Head problem sizes: batch B, sequence length S, hidden width D, vocabulary V."""

    B: int
    S: int
    D: int
    V: int

    def __post_init__(self):
        for name in ("B", "S", "D", "V"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"dims.{name} must be a positive integer, got {value!r}")
        if self.B * self.S * self.D > MAX_ADDRESSABLE or self.B * self.V > MAX_ADDRESSABLE:
            raise OverflowError(f"dims {self} exceed the addressable size")

    def with_axis(self, axis: str, value: int) -> "Dims":
        """Return a copy with one axis replaced; axis is one of batch/seq/vocab."""
        field = {"batch": "B", "seq": "S", "vocab": "V"}.get(axis)
        if field is None:
            raise ValueError(f"unknown axis {axis!r}")
        return replace(self, **{field: value})


@dataclass(frozen=True)
class Uniform:
    lo: float = -1.0
    hi: float = 1.0


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


def splitmix64(seed: int, count: int) -> np.ndarray:
    """SplitMix64 evaluated as a counter-based stream: word i is mix(seed + (i+1)·γ).

    Pure wrapping 64-bit integer arithmetic, so the stream is identical on
    every platform and independent of thread count.
    """
    state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = state + idx * _SM64_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _SM64_MIX1
    z = (z ^ (z >> np.uint64(27))) * _SM64_MIX2
    return z ^ (z >> np.uint64(31))


def _unit_floats(seed: int, count: int) -> np.ndarray:
    # Top 53 bits -> float64 in [0, 1).
    return (splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def _checked_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(n) for n in shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    if any(n < 1 for n in shape):
        raise ValueError(f"shape entries must be positive, got {shape}")
    total = 1
    for n in shape:
        total *= n
        if total > MAX_ADDRESSABLE:
            raise OverflowError(f"shape {shape} overflows the addressable size")
    return shape


def seeded_tensor(shape, seed: int, dist: Uniform | Constant = Uniform()) -> np.ndarray:
    """Deterministic float32 tensor: same bytes for (shape, seed, dist) everywhere."""
    shape = _checked_shape(shape)
    if isinstance(dist, Constant):
        return np.full(shape, np.float32(dist.value), dtype=np.float32)
    if not isinstance(dist, Uniform):
        raise TypeError(f"unsupported distribution {dist!r}")
    if not dist.lo < dist.hi:
        raise ValueError(f"uniform bounds must satisfy lo < hi, got {dist}")
    n = 1
    for d in shape:
        n *= d
    u = _unit_floats(seed, n)
    vals = dist.lo + (dist.hi - dist.lo) * u
    return vals.astype(np.float32).reshape(shape)


def seeded_mask(batch: int, seq: int, seed: int, keep: float = 1.0) -> np.ndarray:
    """{0,1} uint8 attention mask; each position is kept with probability ``keep``."""
    if not 0.0 <= keep <= 1.0:
        raise ValueError(f"keep must lie in [0, 1], got {keep}")
    if keep >= 1.0:
        return np.ones((batch, seq), np.uint8)
    u = _unit_floats(seed, batch * seq)
    return (u < keep).astype(np.uint8).reshape(batch, seq)


def require_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or Inf")


def _require_f32_2d(arr: np.ndarray, name: str) -> None:
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.float32:
        raise TypeError(f"{name} must be float32, got {arr.dtype}")


def matmul_bt(
    a: np.ndarray,
    bmat: np.ndarray,
    bias: np.ndarray | None,
    out: np.ndarray,
    *,
    block_m: int = 32,
    block_n: int = 32,
    deterministic: bool = False,
    accumulate_f64: bool = False,
) -> np.ndarray:
    """out[m, n] = sum_k a[m, k] * bmat[n, k] (+ bias[n]), into preallocated ``out``.

    The default path runs blocked over (M-block, N-block, full K) with
    float32 accumulation. ``deterministic=True`` switches to a fixed-order
    multiply-add sequence whose per-element result does not depend on how
    the product is blocked, so any tiling of the same product is
    bit-identical. ``accumulate_f64=True`` accumulates in float64 before
    the float32 store (oracle runs).
    """
    _require_f32_2d(a, "a")
    _require_f32_2d(bmat, "bmat")
    _require_f32_2d(out, "out")
    m, k = a.shape
    n, kb = bmat.shape
    if kb != k:
        raise ValueError(f"inner dims disagree: a is {a.shape}, bmat is {bmat.shape}")
    if out.shape != (m, n):
        raise ValueError(f"out must be {(m, n)}, got {out.shape}")
    if bias is not None:
        if bias.shape != (n,) or bias.dtype != np.float32:
            raise ValueError(f"bias must be float32 of shape ({n},), got {bias.dtype} {bias.shape}")
        require_finite(bias, "bias")
    require_finite(a, "a")
    require_finite(bmat, "bmat")

    if accumulate_f64:
        acc = a.astype(np.float64) @ bmat.astype(np.float64).T
        if bias is not None:
            acc += bias.astype(np.float64)
        out[...] = acc
        return out

    if deterministic:
        out[...] = 0.0
        for kk in range(k):
            out += a[:, kk, None] * bmat[None, :, kk]
        if bias is not None:
            out += bias
        return out

    for m0 in range(0, m, block_m):
        m1 = min(m0 + block_m, m)
        for n0 in range(0, n, block_n):
            n1 = min(n0 + block_n, n)
            np.matmul(a[m0:m1], bmat[n0:n1].T, out=out[m0:m1, n0:n1])
            if bias is not None:
                out[m0:m1, n0:n1] += bias[n0:n1]
    return out
