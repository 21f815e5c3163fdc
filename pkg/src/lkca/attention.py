"""The shared-kernel attention mechanism, realized three equivalent ways.

One learnable spatial kernel of extent (2*Gh-1, 2*Gw-1) plus a value
projection replace the usual query/key machinery on a Gh x Gw token grid:

* attention view: the kernel is unrolled into an (N, N) score matrix whose
  row for token (i, j) is the row-major flattening of the kernel window with
  top-left corner (Gh-1-i, Gw-1-j) and extent (Gh, Gw); scores multiply the
  projected values directly (no softmax, no scaling, no output projection).
* convolution view: the projected values are folded to per-channel planes
  and cross-correlated with the full kernel under (Gh-1, Gw-1) zero padding.
* spectral view: the same correlation via zero-padded FFTs (inference only).

The unrolled scores are 2D-Toeplitz: entry [(i,j), (p,q)] depends only on the
index difference and equals kernel[Gh-1-i+p, Gw-1-j+q], which is exactly why
the three realizations agree.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import tensor
from .tensor import F32, MacCounter, SeededRng, ShapeError, check_finite

VIEW_ATTENTION = "attention"
VIEW_CONVOLUTION = "convolution"
VIEW_SPECTRAL = "spectral"
VIEWS = (VIEW_ATTENTION, VIEW_CONVOLUTION, VIEW_SPECTRAL)


@dataclass
class LKCAKernel:
    """Shared spatial weights of extent (2*grid_h - 1, 2*grid_w - 1)."""

    weights: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ShapeError(f"grid extents must be >= 1, got {self.grid_h}x{self.grid_w}")
        want = (2 * self.grid_h - 1, 2 * self.grid_w - 1)
        if self.weights.shape != want:
            raise ShapeError(f"kernel weights must be {want} for a "
                             f"{self.grid_h}x{self.grid_w} grid, got {self.weights.shape}")


@dataclass
class ValueProjection:
    weight: np.ndarray  # (d, d)
    bias: np.ndarray    # (d,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"value weight must be square, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"value bias must be ({self.weight.shape[0]},), "
                             f"got {self.bias.shape}")


@dataclass
class LKCALayer:
    kernel: LKCAKernel
    value: ValueProjection
    view: str = VIEW_ATTENTION

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}, expected one of {VIEWS}")

    @property
    def grid_h(self):
        return self.kernel.grid_h

    @property
    def grid_w(self):
        return self.kernel.grid_w

    @property
    def num_tokens(self):
        return self.kernel.grid_h * self.kernel.grid_w

    @property
    def dim(self):
        return self.value.weight.shape[0]


@dataclass
class AttentionMatrix:
    scores: np.ndarray  # (N, N)
    grid_h: int
    grid_w: int


def init_layer(grid_h: int, grid_w: int, dim: int, rng: SeededRng,
               kernel_init: str = "zeros", view: str = VIEW_ATTENTION,
               dtype=F32) -> LKCALayer:
    """Fresh layer: zero kernel by default (an identity start under a residual
    connection), trunc-normal(0, 0.02) value weight, zero bias."""
    kh, kw = 2 * grid_h - 1, 2 * grid_w - 1
    if kernel_init == "zeros":
        weights = np.zeros((kh, kw), dtype=dtype)
    elif kernel_init == "trunc_normal":
        weights = rng.trunc_normal((kh, kw), 0.02, dtype=dtype)
    else:
        raise ValueError(f"unknown kernel_init {kernel_init!r}")
    return LKCALayer(
        kernel=LKCAKernel(weights, grid_h, grid_w),
        value=ValueProjection(rng.trunc_normal((dim, dim), 0.02, dtype=dtype),
                              np.zeros(dim, dtype=dtype)),
        view=view)


def with_view(layer: LKCALayer, view: str) -> LKCALayer:
    """Same parameters (shared arrays), different forward realization."""
    return replace(layer, view=view)


@lru_cache(maxsize=64)
def _unroll_index_map(grid_h: int, grid_w: int) -> np.ndarray:
    """(N, N) map from score position [(i,j), (p,q)] into the flat kernel:
    index (Gh-1-i+p) * (2*Gw-1) + (Gw-1-j+q)."""
    i = np.arange(grid_h)
    j = np.arange(grid_w)
    p = np.arange(grid_h)
    q = np.arange(grid_w)
    rows = (grid_h - 1) - i[:, None, None, None] + p[None, None, :, None]
    cols = (grid_w - 1) - j[None, :, None, None] + q[None, None, None, :]
    n = grid_h * grid_w
    flat = rows * (2 * grid_w - 1) + cols
    return np.ascontiguousarray(flat.reshape(n, n))


def _kernel_unroll(weights: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    return weights.reshape(-1)[_unroll_index_map(grid_h, grid_w)]


def _adj_kernel_unroll(args, aux, out, g):
    (weights,) = args
    grid_h, grid_w = aux
    idx = _unroll_index_map(grid_h, grid_w)
    folded = np.bincount(idx.ravel(), weights=g.ravel(), minlength=weights.size)
    return (folded.reshape(weights.shape).astype(weights.dtype),)


ad.register_primitive("kernel_unroll", _kernel_unroll, _adj_kernel_unroll)


def unroll_weights(weights, grid_h: int, grid_w: int):
    """Kernel weights -> (N, N) scores; differentiable when traced."""
    return ad._dispatch("kernel_unroll", (weights,), (int(grid_h), int(grid_w)))


def unroll_kernel_to_attention(kernel: LKCAKernel) -> AttentionMatrix:
    scores = _kernel_unroll(kernel.weights, kernel.grid_h, kernel.grid_w)
    return AttentionMatrix(scores=scores, grid_h=kernel.grid_h, grid_w=kernel.grid_w)


def _check_tokens(x, layer: LKCALayer):
    shape = x.shape
    if len(shape) != 3:
        raise ShapeError(f"expected (b, N, d) input, got {shape}")
    if shape[1] != layer.num_tokens:
        raise ShapeError(f"token count {shape[1]} does not match grid "
                         f"{layer.grid_h}x{layer.grid_w} = {layer.num_tokens}")
    if shape[2] != layer.dim:
        raise ShapeError(f"feature dim {shape[2]} does not match projection dim {layer.dim}")


def _project_values(x, layer: LKCALayer, macs: MacCounter | None):
    return ad.add(ad.matmul(x, layer.value.weight, macs), layer.value.bias)


def forward_attention_view(x, layer: LKCALayer, macs: MacCounter | None = None):
    """out = unrolled_scores @ (x W_v + b_v), per batch element."""
    _check_tokens(x, layer)
    scores = unroll_weights(layer.kernel.weights, layer.grid_h, layer.grid_w)
    v = _project_values(x, layer, macs)
    return ad.matmul(scores, v, macs)


def forward_conv_view(x, layer: LKCALayer, macs: MacCounter | None = None):
    """Fold projected values to (b*d, Gh, Gw) planes, correlate with the full
    kernel under (Gh-1, Gw-1) padding, unfold back. Output extent is preserved:
    Gh + 2(Gh-1) - (2Gh-1) + 1 == Gh."""
    _check_tokens(x, layer)
    b, _, d = x.shape
    v = _project_values(x, layer, macs)
    planes = ad.grid_fold(v, layer.grid_h, layer.grid_w)
    out = ad.cross_correlate_2d(planes, layer.kernel.weights,
                                layer.grid_h - 1, layer.grid_w - 1, macs)
    return ad.grid_unfold(out, b, d)


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def forward_spectral_view(x, layer: LKCALayer, macs: MacCounter | None = None):
    """Same linear map via zero-padded FFTs (correlation theorem). Inference
    only: not recordable on a tape. FFT work is not MAC-modeled; only the
    value projection is counted."""
    if isinstance(x, ad.Var):
        raise ad.UnsupportedOpError("spectral view is not differentiable; "
                                    "use the attention or convolution view")
    _check_tokens(x, layer)
    gh, gw = layer.grid_h, layer.grid_w
    b, _, d = x.shape
    v = _project_values(x, layer, macs)
    planes = tensor.grid_fold(v, gh, gw)
    mh = _next_pow2(3 * gh - 2)
    mw = _next_pow2(3 * gw - 2)
    fp = np.fft.fft2(planes, s=(mh, mw))
    fk = np.fft.fft2(layer.kernel.weights, s=(mh, mw))
    corr = np.fft.ifft2(fp * np.conj(fk)).real.astype(x.dtype)
    # correlation lag (i - (Gh-1), j - (Gw-1)) lives at that index mod (mh, mw)
    rows = (np.arange(gh) - (gh - 1)) % mh
    cols = (np.arange(gw) - (gw - 1)) % mw
    out_planes = corr[:, rows[:, None], cols[None, :]]
    check_finite(out_planes, "forward_spectral_view")
    return tensor.grid_unfold(out_planes, b, d)


_FORWARDS = {
    VIEW_ATTENTION: forward_attention_view,
    VIEW_CONVOLUTION: forward_conv_view,
    VIEW_SPECTRAL: forward_spectral_view,
}


def forward(x, layer: LKCALayer, macs: MacCounter | None = None):
    """Dispatch on the layer's configured view."""
    return _FORWARDS[layer.view](x, layer, macs)


def backward(x: np.ndarray, layer: LKCALayer, grad_out: np.ndarray):
    """Analytic gradients of out = S(K) @ (x W_v + b_v), independent of the
    tape engine (used to cross-check it).

    Returns (grad_x, grad_kernel, grad_Wv, grad_bv).
    """
    _check_tokens(x, layer)
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    scores = _kernel_unroll(layer.kernel.weights, layer.grid_h, layer.grid_w)
    v = x @ layer.value.weight + layer.value.bias
    g_v = np.matmul(scores.T, grad_out)
    grad_x = np.matmul(g_v, layer.value.weight.T)
    grad_wv = np.einsum("bni,bnj->ij", x, g_v)
    grad_bv = g_v.sum(axis=(0, 1))
    grad_scores = np.einsum("bid,bpd->ip", grad_out, v)
    idx = _unroll_index_map(layer.grid_h, layer.grid_w)
    grad_kernel = np.bincount(idx.ravel(), weights=grad_scores.ravel(),
                              minlength=layer.kernel.weights.size)
    grad_kernel = grad_kernel.reshape(layer.kernel.weights.shape).astype(x.dtype)
    return grad_x.astype(x.dtype), grad_kernel, grad_wv.astype(x.dtype), grad_bv.astype(x.dtype)


def param_registry(layer: LKCALayer) -> dict:
    return {
        "kernel": layer.kernel.weights,
        "value.weight": layer.value.weight,
        "value.bias": layer.value.bias,
    }


def count_params(layer: LKCALayer) -> int:
    """d^2 + d + (2*Gh - 1)(2*Gw - 1)."""
    d = layer.dim
    return d * d + d + (2 * layer.grid_h - 1) * (2 * layer.grid_w - 1)


def count_flops(layer: LKCALayer, batch: int) -> int:
    """2*b*N*d^2 for the value projection plus 2*b*N^2*d for applying the
    scores; identical across attention and convolution views because the
    fully-padded kernel overlaps every input position (1 MAC = 2 FLOPs)."""
    n = layer.num_tokens
    d = layer.dim
    return 2 * batch * n * d * d + 2 * batch * n * n * d
