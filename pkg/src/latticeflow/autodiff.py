"""Dense tensors with reverse-mode differentiation.

Just enough machinery for a fully convolutional surrogate: strided
convolution, its transpose, elementwise arithmetic, a leaky rectifier,
and the two losses. Values live in numpy arrays (float32 by default,
float64 behind `default_dtype` for gradient checking). The graph is
implicit: every op closes over its inputs and records a backward
function; `Tensor.backward()` replays them in reverse topological order,
accumulating gradients additively.

Every forward op checks its output for NaN/Inf and raises NumericError,
so numeric blow-ups surface at the op that caused them.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the tensor dtype (float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextmanager
def no_grad():
    """Disable graph recording (inference rollouts, metric passes)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """A dense array plus its place in the differentiation graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; gradients accumulate."""
        if self.data.shape != ():
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap an op output, checking finiteness and recording the graph edge."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out._prev = tuple(t for t in inputs if t.requires_grad)
        out._backward_fn = backward_fn
    else:
        out._prev = ()
        out._backward_fn = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.data.shape} and {b.data.shape}")


# --- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; the one permitted broadcast is a rank-1 bias over the last axis."""
    bias_mode = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_mode:
        _require_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        if bias_mode:
            _accum(b, g.sum(axis=tuple(range(g.ndim - 1))))
        else:
            _accum(b, g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _require_same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward(g):
        _accum(a, g * b_data)
        _accum(b, g * a_data)

    return _result(a_data * b_data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(a, g * s)

    return _result(a.data * a.data.dtype.type(s), (a,), backward, "scale")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    """Rectifier with a small negative slope (keeps small nets free of dead units)."""
    pos = a.data >= 0

    def backward(g):
        _accum(a, g * np.where(pos, 1.0, slope).astype(g.dtype))

    return _result(np.where(pos, a.data, a.data * a.data.dtype.type(slope)), (a,), backward, "leaky_relu")


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.data.shape
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {old_shape} to {tuple(shape)}")

    def backward(g):
        _accum(a, g.reshape(old_shape))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the channel (last) axis."""
    c = a.data.shape[-1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"channel slice [{start}:{stop}] outside {c} channels")

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        _accum(a, ga)

    return _result(np.ascontiguousarray(a.data[..., start:stop]), (a,), backward, "channel_slice")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.full_like(a.data, g))

    return _result(a.data.sum(), (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accum(a, np.full_like(a.data, g / n))

    return _result(a.data.mean(), (a,), backward, "mean_all")


# --- convolution kernels (shared by autodiff ops and patch decoding) ---------


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero padding giving ceil(size/stride) outputs, split before/after."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d_raw(x: np.ndarray, k: np.ndarray, stride: int, pads) -> np.ndarray:
    """Cross-correlation of x (n,h,w,cin) with k (kh,kw,cin,cout).

    `pads` is (top, bottom, left, right) zero padding; output covers every
    stride-aligned window of the padded input.
    """
    ph0, ph1, pw0, pw1 = pads
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ k.reshape(kh * kw * cin, cout)
    return out.reshape(n, ho, wo, cout)


def conv2d_input_grad_raw(
    gy: np.ndarray, k: np.ndarray, stride: int, x_shape, pads
) -> np.ndarray:
    """Adjoint of conv2d_raw in its input: scatter gy back through k."""
    ph0, ph1, pw0, pw1 = pads
    n, h, w, cin = x_shape
    kh, kw, _, cout = k.shape
    _, ho, wo, _ = gy.shape
    gcols = gy.reshape(n * ho * wo, cout) @ k.reshape(kh * kw * cin, cout).T
    gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
    gxp = np.zeros((n, h + ph0 + ph1, w + pw0 + pw1, cin), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[
                :, :, :, i, j, :
            ]
    return gxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :]


def conv2d_kernel_grad_raw(
    x: np.ndarray, gy: np.ndarray, stride: int, k_shape, pads
) -> np.ndarray:
    """Adjoint of conv2d_raw in its kernel."""
    ph0, ph1, pw0, pw1 = pads
    kh, kw, cin, cout = k_shape
    _, ho, wo, _ = gy.shape
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    gk = np.empty(k_shape, dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
            gk[i, j] = np.tensordot(xs, gy, axes=([0, 1, 2], [0, 1, 2]))
    return gk


def _same_pads(h: int, w: int, kh: int, kw: int, stride: int):
    ph0, ph1 = same_padding(h, kh, stride)
    pw0, pw1 = same_padding(w, kw, stride)
    return ph0, ph1, pw0, pw1


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded "same" convolution; output is (n, ceil(h/s), ceil(w/s), cout)."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(
            f"conv2d requires rank-4 input and kernel, got {x.data.shape} and {k.data.shape}"
        )
    if x.data.shape[3] != k.data.shape[2]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[3]}, kernel expects {k.data.shape[2]}"
        )
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    n, h, w, _ = x.data.shape
    kh, kw, _, _ = k.data.shape
    pads = _same_pads(h, w, kh, kw, stride)
    x_data, k_data = x.data, k.data

    def backward(g):
        if x.requires_grad:
            _accum(x, conv2d_input_grad_raw(g, k_data, stride, x_data.shape, pads))
        if k.requires_grad:
            _accum(k, conv2d_kernel_grad_raw(x_data, g, stride, k_data.shape, pads))

    return _result(conv2d_raw(x_data, k_data, stride, pads), (x, k), backward, "conv2d")


def transpose_conv2d(y: Tensor, k: Tensor) -> Tensor:
    """Stride-2 transpose convolution doubling spatial dims.

    Defined as the exact adjoint of the stride-2 "same" conv2d with the
    same kernel: <conv2d(x, k), y> == <x, transpose_conv2d(y, k)>. The
    kernel is (kh, kw, c_out, c_in) with c_in matching y's channels.
    """
    if y.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(
            f"transpose_conv2d requires rank-4 input and kernel, got {y.data.shape} and {k.data.shape}"
        )
    if y.data.shape[3] != k.data.shape[3]:
        raise ShapeError(
            f"transpose_conv2d channel mismatch: input has {y.data.shape[3]}, "
            f"kernel expects {k.data.shape[3]}"
        )
    n, h, w, _ = y.data.shape
    kh, kw, cout, _ = k.data.shape
    out_shape = (n, 2 * h, 2 * w, cout)
    pads = _same_pads(2 * h, 2 * w, kh, kw, 2)
    y_data, k_data = y.data, k.data

    def backward(g):
        if y.requires_grad:
            _accum(y, conv2d_raw(g, k_data, 2, pads))
        if k.requires_grad:
            _accum(k, conv2d_kernel_grad_raw(g, y_data, 2, k_data.shape, pads))

    out = conv2d_input_grad_raw(y_data, k_data, 2, out_shape, pads)
    return _result(out, (y, k), backward, "transpose_conv2d")


# --- losses -------------------------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    _require_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        gd = g * (2.0 / n) * diff
        _accum(a, gd)
        _accum(b, -gd)

    return _result(np.mean(diff * diff), (a, b), backward, "mse")


def gdl(a: Tensor, b: Tensor) -> Tensor:
    """Gradient difference loss on rank-4 tensors (n, x, y, c).

    Penalizes mismatched magnitudes of spatial forward differences:
    mean over valid x-positions of (|da_x| - |db_x|)^2 plus the same for
    the y axis. Constant offsets between a and b contribute nothing.
    """
    _require_same_shape(a, b, "gdl")
    if a.data.ndim != 4:
        raise ShapeError(f"gdl requires rank-4 tensors, got {a.data.shape}")
    da_x = a.data[:, 1:] - a.data[:, :-1]
    db_x = b.data[:, 1:] - b.data[:, :-1]
    da_y = a.data[:, :, 1:] - a.data[:, :, :-1]
    db_y = b.data[:, :, 1:] - b.data[:, :, :-1]
    ex = np.abs(da_x) - np.abs(db_x)
    ey = np.abs(da_y) - np.abs(db_y)
    value = np.mean(ex * ex) + np.mean(ey * ey)

    def backward(g):
        ga = np.zeros_like(a.data)
        gb = np.zeros_like(b.data)
        gex = g * (2.0 / ex.size) * ex
        gey = g * (2.0 / ey.size) * ey
        # d|d|/dd is sign(d); the measure-zero kink at 0 takes subgradient 0.
        gdax = gex * np.sign(da_x)
        gdbx = -gex * np.sign(db_x)
        gday = gey * np.sign(da_y)
        gdby = -gey * np.sign(db_y)
        ga[:, 1:] += gdax
        ga[:, :-1] -= gdax
        gb[:, 1:] += gdbx
        gb[:, :-1] -= gdbx
        ga[:, :, 1:] += gday
        ga[:, :, :-1] -= gday
        gb[:, :, 1:] += gdby
        gb[:, :, :-1] -= gdby
        _accum(a, ga)
        _accum(b, gb)

    return _result(np.asarray(value), (a, b), backward, "gdl")
