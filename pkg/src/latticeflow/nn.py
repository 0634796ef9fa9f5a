"""Parameters, convolution layers, residual blocks, and Adam.

Layers are thin containers of named Parameters with a __call__ building
the autodiff graph. Initialization is fan-in-scaled uniform for kernels
and zeros for biases; the closing convolution of every residual branch
starts at zero so each block begins as the identity (or as its skip
projection), which keeps long unrolled chains stable at the start of
training.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    add,
    conv2d,
    get_default_dtype,
    leaky_relu,
    transpose_conv2d,
)
from .errors import ShapeError


class Parameter(Tensor):
    """Trainable tensor with its Adam state (m, v, step count)."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def load(self, values: np.ndarray, m: np.ndarray, v: np.ndarray, t: int) -> None:
        if values.shape != self.data.shape:
            raise ShapeError(
                f"parameter {self.name}: stored shape {values.shape} != expected {self.data.shape}"
            )
        dtype = get_default_dtype()
        self.data = values.astype(dtype)
        self.m = m.astype(dtype)
        self.v = v.astype(dtype)
        self.t = int(t)


def _kernel_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class ConvLayer:
    """Same-padded convolution with optional bias."""

    def __init__(
        self,
        name: str,
        kh: int,
        kw: int,
        cin: int,
        cout: int,
        stride: int = 1,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
        bias: bool = True,
    ):
        self.name = name
        self.stride = stride
        if zero_init:
            kernel = np.zeros((kh, kw, cin, cout))
        else:
            kernel = _kernel_init(rng, (kh, kw, cin, cout), kh * kw * cin)
        self.kernel = Parameter(kernel, f"{name}.kernel")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.kernel, self.stride)
        if self.bias is not None:
            out = add(out, self.bias)
        return out

    def params(self) -> list[Parameter]:
        return [self.kernel] + ([self.bias] if self.bias is not None else [])


class TransposeConvLayer:
    """Stride-2 transpose convolution, kernel 4x4, doubling spatial dims."""

    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        rng: np.random.Generator,
        bias: bool = True,
    ):
        self.name = name
        kernel = _kernel_init(rng, (4, 4, cout, cin), 4 * 4 * cin)
        self.kernel = Parameter(kernel, f"{name}.kernel")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = transpose_conv2d(x, self.kernel)
        if self.bias is not None:
            out = add(out, self.bias)
        return out

    def params(self) -> list[Parameter]:
        return [self.kernel] + ([self.bias] if self.bias is not None else [])


class ResidualBlock:
    """Pre-activation residual block: y = x + C2(s(C1(s(x)))), 3x3 convs."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, leak: float = 0.1):
        self.leak = leak
        self.conv1 = ConvLayer(f"{name}.conv1", 3, 3, channels, channels, rng=rng)
        self.conv2 = ConvLayer(f"{name}.conv2", 3, 3, channels, channels, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(leaky_relu(x, self.leak))
        h = self.conv2(leaky_relu(h, self.leak))
        return add(x, h)

    def params(self) -> list[Parameter]:
        return self.conv1.params() + self.conv2.params()


class DownResidualBlock:
    """Downsampling residual block: halves spatial dims, rescales channels.

    The branch opens with a 4x4 stride-2 convolution; the skip path is a
    1x1 stride-2 linear projection so shapes agree.
    """

    def __init__(
        self, name: str, cin: int, cout: int, rng: np.random.Generator, leak: float = 0.1
    ):
        self.leak = leak
        self.conv1 = ConvLayer(f"{name}.conv1", 4, 4, cin, cout, stride=2, rng=rng)
        self.conv2 = ConvLayer(f"{name}.conv2", 3, 3, cout, cout, zero_init=True)
        self.proj = ConvLayer(f"{name}.proj", 1, 1, cin, cout, stride=2, rng=rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(leaky_relu(x, self.leak))
        h = self.conv2(leaky_relu(h, self.leak))
        return add(self.proj(x), h)

    def params(self) -> list[Parameter]:
        return self.conv1.params() + self.conv2.params() + self.proj.params()


def zero_grad(params: list[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: list[Parameter],
    grads: list[np.ndarray] | None = None,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update.

    Uses each parameter's accumulated .grad unless explicit grads are
    given; a missing gradient counts as zero (the parameter keeps its
    value but its step count still advances).
    """
    for i, p in enumerate(params):
        g = grads[i] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        p.t += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1**p.t)
        v_hat = p.v / (1.0 - beta2**p.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
