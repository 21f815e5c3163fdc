"""Reverse-mode differentiation over the primitive op set, plus the
finite-difference oracle every gradient test is checked against.

Every primitive here is usable in two modes through the same call:

* eager: plain ndarrays in, ndarray out (optionally MAC-counted);
* traced: any argument that is a :class:`Var` records the application on its
  :class:`Tape`, and ``tape.backward(loss)`` later returns gradients for every
  named leaf.

Because the traced path runs the identical numeric kernels, a recorded forward
is bitwise equal to the eager one, and ``Tape.replay`` can re-derive every
recorded value from the leaves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import F64, MacCounter, ShapeError, check_finite


class UnsupportedOpError(RuntimeError):
    """Raised when the tape meets an op with no registered adjoint."""


# op name -> (forward kernel, adjoint). The adjoint maps
# (input values, aux, output value, output cotangent) -> per-input gradients.
_KERNELS: dict = {}
_ADJOINTS: dict = {}


def register_primitive(name: str, kernel, adjoint):
    _KERNELS[name] = kernel
    _ADJOINTS[name] = adjoint


class Var:
    """Handle to one tape node; `.value` is the recorded ndarray."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass
class _Entry:
    op: str
    arg_ids: tuple
    aux: tuple
    out_id: int


@dataclass
class Tape:
    """Ordered record of primitive applications, inputs before consumers."""

    values: list = field(default_factory=list)
    entries: list = field(default_factory=list)
    leaf_names: dict = field(default_factory=dict)  # node id -> name

    def _new_node(self, value: np.ndarray) -> Var:
        self.values.append(np.asarray(value))
        return Var(self, len(self.values) - 1)

    def leaf(self, name: str, value: np.ndarray) -> Var:
        """A named differentiable leaf (parameter or input)."""
        if name in self.leaf_names.values():
            raise ValueError(f"duplicate leaf name {name!r}")
        var = self._new_node(value)
        self.leaf_names[var.index] = name
        return var

    def constant(self, value: np.ndarray) -> Var:
        """An anonymous leaf; gradients flowing into it are discarded."""
        return self._new_node(value)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("argument belongs to a different tape")
            return x
        return self.constant(x)

    def apply(self, op: str, args: tuple, aux: tuple = ()) -> Var:
        if op not in _KERNELS:
            raise UnsupportedOpError(f"no kernel registered for op {op!r}")
        vars_ = tuple(self.lift(a) for a in args)
        out = _KERNELS[op](*(v.value for v in vars_), *aux)
        var = self._new_node(out)
        self.entries.append(_Entry(op, tuple(v.index for v in vars_), aux, var.index))
        return var

    def backward(self, loss: Var) -> dict:
        """Gradients of a scalar loss w.r.t. every named leaf.

        Accumulation order is the fixed reverse of the recording order, so two
        calls on one tape produce bitwise-identical results.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss must be a Var recorded on this tape")
        if loss.value.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.index: np.asarray(1.0, dtype=loss.value.dtype)}
        for entry in reversed(self.entries):
            g_out = grads.get(entry.out_id)
            if g_out is None:
                continue
            adjoint = _ADJOINTS.get(entry.op)
            if adjoint is None:
                raise UnsupportedOpError(f"no adjoint registered for op {entry.op!r}")
            arg_values = tuple(self.values[i] for i in entry.arg_ids)
            arg_grads = adjoint(arg_values, entry.aux, self.values[entry.out_id], g_out)
            for arg_id, g in zip(entry.arg_ids, arg_grads):
                if g is None:
                    continue
                if arg_id in grads:
                    grads[arg_id] = grads[arg_id] + g
                else:
                    grads[arg_id] = g
        out = {}
        for idx, name in self.leaf_names.items():
            g = grads.get(idx)
            if g is None:
                g = np.zeros_like(self.values[idx])
            out[name] = np.asarray(g, dtype=self.values[idx].dtype)
        return out

    def replay(self) -> list:
        """Recompute every recorded output from the leaves with the same
        kernels; returns the list of recomputed node values."""
        values = list(self.values)
        for entry in self.entries:
            values[entry.out_id] = _KERNELS[entry.op](
                *(values[i] for i in entry.arg_ids), *entry.aux)
        return values


def _find_tape(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("arguments belong to different tapes")
    return tape


def _dispatch(op: str, args: tuple, aux: tuple = ()):
    tape = _find_tape(*args)
    if tape is None:
        return _KERNELS[op](*args, *aux)
    return tape.apply(op, args, aux)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _adj_matmul(args, aux, out, g):
    a, b = args
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_primitive("matmul", tensor.matmul, _adj_matmul)


def matmul(a, b, macs: MacCounter | None = None):
    if _find_tape(a, b) is None:
        return tensor.matmul(a, b, macs)
    return _dispatch("matmul", (a, b))


register_primitive(
    "add", lambda a, b: a + b,
    lambda args, aux, out, g: (_unbroadcast(g, args[0].shape),
                               _unbroadcast(g, args[1].shape)))


def add(a, b):
    return _dispatch("add", (a, b))


register_primitive(
    "mul", lambda a, b: a * b,
    lambda args, aux, out, g: (_unbroadcast(g * args[1], args[0].shape),
                               _unbroadcast(g * args[0], args[1].shape)))


def mul(a, b):
    return _dispatch("mul", (a, b))


register_primitive(
    "scale", lambda a, c: a * a.dtype.type(c),
    lambda args, aux, out, g: (g * args[0].dtype.type(aux[0]),))


def scale(a, c: float):
    return _dispatch("scale", (a,), (float(c),))


register_primitive(
    "reshape", lambda a, shape: a.reshape(shape),
    lambda args, aux, out, g: (g.reshape(args[0].shape),))


def reshape(a, shape):
    return _dispatch("reshape", (a,), (tuple(shape),))


register_primitive(
    "transpose", lambda a, axes: a.transpose(axes),
    lambda args, aux, out, g: (g.transpose(np.argsort(aux[0])),))


def transpose(a, axes):
    return _dispatch("transpose", (a,), (tuple(axes),))


def _adj_layer_norm(args, aux, out, g):
    x, gamma, beta = args
    eps = aux[0]
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    gy = g * gamma
    gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
    lead = tuple(range(x.ndim - 1))
    return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


register_primitive("layer_norm", tensor.layer_norm, _adj_layer_norm)


def layer_norm(x, gamma, beta, eps: float = tensor.LAYER_NORM_EPS):
    return _dispatch("layer_norm", (x, gamma, beta), (float(eps),))


def _adj_gelu(args, aux, out, g):
    (x,) = args
    inner = tensor.GELU_SQRT_2_OVER_PI * (x + tensor.GELU_CUBIC_COEFF * x * x * x)
    t = np.tanh(inner)
    d_inner = tensor.GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * tensor.GELU_CUBIC_COEFF * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)


register_primitive("gelu", tensor.gelu, _adj_gelu)


def gelu(x):
    return _dispatch("gelu", (x,))


def _adj_softmax_rows(args, aux, out, g):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


register_primitive("softmax_rows", tensor.softmax_rows, _adj_softmax_rows)


def softmax_rows(x):
    return _dispatch("softmax_rows", (x,))


def _adj_cross_correlate_2d(args, aux, out, g):
    x, kernel = args
    pad_h, pad_w = aux
    c, hi, wi = x.shape
    kh, kw = kernel.shape
    # grad wrt padded input is g correlated with the flipped kernel at full pad;
    # cropping the pad border leaves grad wrt x.
    gx_padded = tensor.cross_correlate_2d(g, kernel[::-1, ::-1], kh - 1, kw - 1)
    gx = gx_padded[:, pad_h:pad_h + hi, pad_w:pad_w + wi]
    padded = np.zeros((c, hi + 2 * pad_h, wi + 2 * pad_w), dtype=x.dtype)
    padded[:, pad_h:pad_h + hi, pad_w:pad_w + wi] = x
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (g.shape[1], g.shape[2]), axis=(1, 2))
    gk = np.einsum("cuvij,cij->uv", windows, g)
    return np.ascontiguousarray(gx), gk


register_primitive("cross_correlate_2d", tensor.cross_correlate_2d, _adj_cross_correlate_2d)


def cross_correlate_2d(x, kernel, pad_h: int, pad_w: int, macs: MacCounter | None = None):
    if _find_tape(x, kernel) is None:
        return tensor.cross_correlate_2d(x, kernel, pad_h, pad_w, macs)
    return _dispatch("cross_correlate_2d", (x, kernel), (int(pad_h), int(pad_w)))


register_primitive(
    "grid_fold", tensor.grid_fold,
    lambda args, aux, out, g: (tensor.grid_unfold(g, args[0].shape[0], args[0].shape[2]),))


def grid_fold(x, grid_h: int, grid_w: int):
    return _dispatch("grid_fold", (x,), (int(grid_h), int(grid_w)))


register_primitive(
    "grid_unfold", tensor.grid_unfold,
    lambda args, aux, out, g: (tensor.grid_fold(g, args[0].shape[1], args[0].shape[2]),))


def grid_unfold(g_planes, b: int, d: int):
    return _dispatch("grid_unfold", (g_planes,), (int(b), int(d)))


def _kernel_mean_axis(a, axis):
    return a.mean(axis=axis)


def _adj_mean_axis(args, aux, out, g):
    (a,) = args
    axis = aux[0]
    extent = a.shape[axis]
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / a.dtype.type(extent),)


register_primitive("mean_axis", _kernel_mean_axis, _adj_mean_axis)


def mean_axis(a, axis: int):
    return _dispatch("mean_axis", (a,), (int(axis),))


register_primitive(
    "sum_all", lambda a: np.asarray(a.sum(), dtype=a.dtype),
    lambda args, aux, out, g: (np.full_like(args[0], g),))


def sum_all(a):
    return _dispatch("sum_all", (a,))


def _smoothed_targets(labels: np.ndarray, k: int, eps: float, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if k < 2:
        raise ShapeError(f"cross_entropy_smoothed: need >= 2 classes, got {k}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    targets = np.full((labels.shape[0], k), eps / (k - 1), dtype=dtype)
    targets[np.arange(labels.shape[0]), labels] = 1.0 - eps
    return targets


def _kernel_cross_entropy(logits, labels, eps):
    b, k = logits.shape
    targets = _smoothed_targets(labels, k, eps, logits.dtype)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -(targets * log_probs).sum(axis=-1).mean()
    return check_finite(np.asarray(loss, dtype=logits.dtype), "cross_entropy_smoothed")


def _adj_cross_entropy(args, aux, out, g):
    (logits,) = args
    labels, eps = aux
    b, k = logits.shape
    targets = _smoothed_targets(labels, k, eps, logits.dtype)
    probs = tensor.softmax_rows(logits)
    return ((probs - targets) * (g / logits.dtype.type(b)),)


register_primitive(
    "cross_entropy_smoothed",
    lambda logits, labels, eps: _kernel_cross_entropy(logits, labels, eps),
    _adj_cross_entropy)


def cross_entropy_smoothed(logits, labels, eps: float):
    labels = np.asarray(labels, dtype=np.int64)
    return _dispatch("cross_entropy_smoothed", (logits,),
                     (tuple(int(v) for v in labels), float(eps)))


# ---------------------------------------------------------------------------
# Finite-difference oracle and gradient checking
# ---------------------------------------------------------------------------

FD_STEP = 1e-4


def finite_diff(f, params: dict, h: float = FD_STEP) -> dict:
    """Central differences (f(p+h) - f(p-h)) / 2h per coordinate, in float64.

    `f` maps a {name: ndarray} dict to a scalar and must be deterministic.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    base = {k: np.asarray(v, dtype=F64).copy() for k, v in params.items()}
    grads = {}
    for name, value in base.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(base))
            flat[i] = orig - h
            f_minus = float(f(base))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over coordinates of |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=F64)
    b = np.asarray(b, dtype=F64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / denom).max())


@dataclass
class GradCheckReport:
    errors: dict            # parameter group name -> max relative error
    tolerance: float
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        lines = []
        for name, err in self.errors.items():
            status = "ok" if err <= self.tolerance else "FAIL"
            lines.append(f"{name}: max rel err {err:.3e} [{status}]")
        lines.append(f"grad check {'PASSED' if self.passed else 'FAILED'} "
                     f"(tolerance {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(loss_fn, params: dict, tolerance: float = 1e-5,
               h: float = FD_STEP) -> GradCheckReport:
    """Compare tape gradients against central differences, both in float64.

    `loss_fn` takes a {name: array-or-Var} dict and returns the scalar loss;
    the same callable serves both paths because the primitives dispatch on
    their argument types.
    """
    params64 = {k: np.asarray(v, dtype=F64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(k, v) for k, v in params64.items()}
    loss = loss_fn(leaves)
    analytic = tape.backward(loss)
    numeric = finite_diff(lambda p: np.asarray(loss_fn(p)), params64, h=h)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in params64}
    failures = [k for k, e in errors.items() if e > tolerance]
    return GradCheckReport(errors=errors, tolerance=tolerance, failures=failures)
