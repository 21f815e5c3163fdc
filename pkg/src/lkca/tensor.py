"""Dense numeric core: shapes, GEMM, layer norm, activations, 2D cross-correlation,
grid reshapes, seeded randomness, and an optional multiply-add counter.

Tensors are plain numpy arrays, row-major, float32 or float64 for the whole
array. Every operation here is a pure function of its inputs; the single
exception is the explicitly-passed :class:`MacCounter`, which only observes.
Arithmetic ops raise :class:`NumericsError` instead of silently propagating
NaN/Inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

F32 = np.float32
F64 = np.float64
I64 = np.int64

LAYER_NORM_EPS = 1e-5

# tanh-approximation GELU constants: x/2 * (1 + tanh(sqrt(2/pi) * (x + c*x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC_COEFF = 0.044715


class ShapeError(ValueError):
    """Operand extents are incompatible with the operation."""


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf."""


def check_finite(x, op: str):
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{op} produced non-finite values")
    return x


def _check_float(name: str, x):
    if not isinstance(x, np.ndarray) or x.dtype not in (F32, F64):
        raise TypeError(f"{name} must be a float32/float64 ndarray, got {type(x).__name__}"
                        + (f" dtype={x.dtype}" if isinstance(x, np.ndarray) else ""))


def _check_same_dtype(a, b, op: str):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed precisions {a.dtype} and {b.dtype}")


@dataclass
class MacCounter:
    """Accumulates multiply-add counts. Never touches the numbers themselves,
    so enabling it cannot change any result bit."""

    enabled: bool = True
    macs: int = 0

    def add(self, n: int):
        if self.enabled:
            self.macs += int(n)

    def reset(self):
        self.macs = 0


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_SM64_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM64_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM64_MUL2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG_53 = 2.0 ** -53


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # Finalizer of splitmix64 (Steele, Lea & Flood); input is seed + index*gamma.
    with np.errstate(over="ignore"):
        z = (x ^ (x >> np.uint64(30))) * _SM64_MUL1
        z = (z ^ (z >> np.uint64(27))) * _SM64_MUL2
        return z ^ (z >> np.uint64(31))


class SeededRng:
    """splitmix64 run in counter mode: output i is mix(seed + (i+1)*gamma).

    The integer stream is bit-exact on every platform. Normal deviates use the
    Box-Muller transform on 53-bit uniforms; their bits additionally depend on
    the platform libm's log/cos/sin rounding, which is stable on any one
    machine (and in practice across common ones).
    """

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            state = self.seed + idx * _SM64_GAMMA
        return _splitmix64(state)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1): top 53 bits scaled by 2**-53."""
        return (self.raw(n) >> np.uint64(11)).astype(F64) * _TWO_NEG_53

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=F32) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        bits = self.raw(2 * pairs)
        # u1 in (0, 1] so log never sees zero; u2 in [0, 1).
        u1 = ((bits[:pairs] >> np.uint64(11)).astype(F64) + 1.0) * _TWO_NEG_53
        u2 = (bits[pairs:] >> np.uint64(11)).astype(F64) * _TWO_NEG_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1).ravel()[:n]
        out = (mean + std * z).reshape(shape).astype(dtype)
        return check_finite(out, "rand_normal")

    def trunc_normal(self, shape, std: float, dtype=F32) -> np.ndarray:
        """Normal(0, std) with draws outside +-2*std resampled."""
        x = self.normal(shape, 0.0, std, dtype=F64)
        if std > 0:
            bad = np.abs(x) > 2.0 * std
            while np.any(bad):
                x[bad] = self.normal((int(bad.sum()),), 0.0, std, dtype=F64)
                bad = np.abs(x) > 2.0 * std
        return x.astype(dtype)

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """n ints uniform in [lo, hi) via floor(u * range); bias < 2**-53 * range."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return (lo + np.floor(self.uniform(n) * (hi - lo))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates over an index array, one swap per uniform draw."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rand_normal(rng: SeededRng, shape, mean: float = 0.0, std: float = 1.0, dtype=F32):
    return rng.normal(shape, mean, std, dtype=dtype)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray, macs: MacCounter | None = None) -> np.ndarray:
    """Matrix product over the trailing two axes, numpy-style broadcast on the
    leading axes. Adds (leading broadcast size) * m * n * k to `macs`."""
    _check_float("a", a)
    _check_float("b", b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a, b)
    if macs is not None:
        lead = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
        macs.add(lead * out.shape[-2] * out.shape[-1] * a.shape[-1])
    return check_finite(out, "matmul")


def _overlap_len(out_len: int, k_len: int, in_len: int, pad: int) -> int:
    # Multiplies that touch real input (zero padding contributes no MACs).
    total = 0
    for i in range(out_len):
        lo = max(0, pad - i)
        hi = min(k_len, pad + in_len - i)
        total += max(0, hi - lo)
    return total


def cross_correlate_2d(x: np.ndarray, kernel: np.ndarray, pad_h: int, pad_w: int,
                       macs: MacCounter | None = None) -> np.ndarray:
    """Slide `kernel` (not flipped) over zero-padded `x`, one shared kernel for
    every channel.

    x: (c, Hi, Wi); kernel: (Kh, Kw); output (c, Ho, Wo) with
    Ho = Hi + 2*pad_h - Kh + 1 and out[ch,i,j] = sum_{u,v} kernel[u,v] *
    padded(x)[ch, i+u, j+v].
    """
    _check_float("x", x)
    _check_float("kernel", kernel)
    _check_same_dtype(x, kernel, "cross_correlate_2d")
    if x.ndim != 3 or kernel.ndim != 2:
        raise ShapeError(f"cross_correlate_2d: need (c,H,W) input and (Kh,Kw) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    c, hi, wi = x.shape
    kh, kw = kernel.shape
    ho = hi + 2 * pad_h - kh + 1
    wo = wi + 2 * pad_w - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"cross_correlate_2d: non-positive output extent ({ho}, {wo}) "
                         f"for input {x.shape}, kernel {kernel.shape}, pad ({pad_h}, {pad_w})")
    padded = np.zeros((c, hi + 2 * pad_h, wi + 2 * pad_w), dtype=x.dtype)
    padded[:, pad_h:pad_h + hi, pad_w:pad_w + wi] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.einsum("cijuv,uv->cij", windows, kernel)
    if macs is not None:
        macs.add(c * _overlap_len(ho, kh, hi, pad_h) * _overlap_len(wo, kw, wi, pad_w))
    return check_finite(out, "cross_correlate_2d")


def grid_fold(x: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """(b, N, d) -> (b*d, Gh, Gw). Token t = i*Gw + j lands on grid cell (i, j);
    output planes are ordered batch-major, channel-minor."""
    if x.ndim != 3:
        raise ShapeError(f"grid_fold: need (b, N, d), got {x.shape}")
    b, n, d = x.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"grid_fold: token count {n} != {grid_h}*{grid_w}")
    return np.ascontiguousarray(
        x.transpose(0, 2, 1).reshape(b * d, grid_h, grid_w))


def grid_unfold(g: np.ndarray, b: int, d: int) -> np.ndarray:
    """Exact inverse of :func:`grid_fold`: (b*d, Gh, Gw) -> (b, Gh*Gw, d)."""
    if g.ndim != 3:
        raise ShapeError(f"grid_unfold: need (b*d, Gh, Gw), got {g.shape}")
    if g.shape[0] != b * d:
        raise ShapeError(f"grid_unfold: leading extent {g.shape[0]} != {b}*{d}")
    gh, gw = g.shape[1], g.shape[2]
    return np.ascontiguousarray(
        g.reshape(b, d, gh * gw).transpose(0, 2, 1))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize each last-axis slice to zero mean / unit population variance,
    then scale and shift."""
    _check_float("x", x)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + eps) * gamma + beta
    return check_finite(out, "layer_norm")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-shifted for stability."""
    _check_float("x", x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return check_finite(out, "softmax_rows")


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    _check_float("x", x)
    inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEFF * x * x * x)
    out = 0.5 * x * (1.0 + np.tanh(inner))
    return check_finite(out, "gelu")
