"""Differentiable layer primitives.

Each primitive comes as a pair of plain functions (``*_forward`` /
``*_backward``) plus a small stateful layer class that owns its
:class:`Parameter` objects and caches what the backward pass needs.

Convolutions are cross-correlations with symmetric zero "same" padding.
Transposed convolutions are fixed at kernel 2, stride 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, check_tensor, get_default_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class StateError(RuntimeError):
    """Raised when backward is requested without a matching training forward."""


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def padding(self) -> int:
        return self.kernel // 2


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Zero-mean normal draw with variance 2 / fan_in."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype or get_default_dtype())


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def _col2im(dcols, x_shape, k, stride, pad, oh, ow):
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, oh, ow, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def _conv_check(x, weight, bias, stride):
    n, c, h, w = check_tensor(x, "x")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ShapeError(f"conv weight must be (out, in, k, k) with odd k, got {weight.shape}")
    if weight.shape[1] != c:
        raise ShapeError(f"input has {c} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _conv_forward(x, weight, bias, stride):
    _conv_check(x, weight, bias, stride)
    oc, _, k, _ = weight.shape
    cols, oh, ow = _im2col(x, k, stride, k // 2)
    out = cols @ weight.reshape(oc, -1).T
    out += bias
    out = out.reshape(x.shape[0], oh, ow, oc).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_backward(x_shape, cols, weight, dout, stride):
    oc, _, k, _ = weight.shape
    n, _, oh, ow = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, oc)
    grad_bias = dmat.sum(axis=0)
    grad_weight = (dmat.T @ cols).reshape(weight.shape)
    dcols = dmat @ weight.reshape(oc, -1)
    grad_x = _col2im(dcols, x_shape, k, stride, k // 2, oh, ow)
    return grad_x, grad_weight, grad_bias


def conv2d_forward(x, weight, bias, stride=1):
    """Same-padded cross-correlation. Output is (n, out, ceil(h/stride), ceil(w/stride))."""
    return _conv_forward(x, weight, bias, stride)[0]


def conv2d_backward(x, weight, upstream_grad, stride=1):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    bias = np.zeros(weight.shape[0], dtype=weight.dtype)
    _conv_check(x, weight, bias, stride)
    k = weight.shape[2]
    cols, oh, ow = _im2col(x, k, stride, k // 2)
    if upstream_grad.shape != (x.shape[0], weight.shape[0], oh, ow):
        raise ShapeError(f"upstream grad {upstream_grad.shape} does not match conv output")
    return _conv_backward(x.shape, cols, weight, upstream_grad, stride)


# ---------------------------------------------------------------------------
# transposed convolution (kernel 2, stride 2)


def _deconv_check(x, weight, bias):
    check_tensor(x, "x")
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"deconv weight must be (in, out, 2, 2), got {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} output channels")


def deconv2d_forward(x, weight, bias, stride=2):
    if stride != 2:
        raise ValueError("transposed convolution supports stride 2 only")
    _deconv_check(x, weight, bias)
    n, _, h, w = x.shape
    oc = weight.shape[1]
    out = np.tensordot(x, weight, axes=([1], [0]))  # n, h, w, oc, 2, 2
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, oc, 2 * h, 2 * w)
    out += bias[None, :, None, None]
    return np.ascontiguousarray(out)


def deconv2d_backward(x, weight, upstream_grad, stride=2):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`deconv2d_forward`."""
    if stride != 2:
        raise ValueError("transposed convolution supports stride 2 only")
    _deconv_check(x, weight, np.zeros(weight.shape[1], dtype=weight.dtype))
    n, ic, h, w = x.shape
    oc = weight.shape[1]
    if upstream_grad.shape != (n, oc, 2 * h, 2 * w):
        raise ShapeError(f"upstream grad {upstream_grad.shape} does not match deconv output")
    g = upstream_grad.reshape(n, oc, h, 2, w, 2)
    grad_x = np.tensordot(g, weight, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    grad_weight = np.tensordot(x, g, axes=([0, 2, 3], [0, 2, 4]))
    grad_bias = upstream_grad.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_weight, grad_bias


# ---------------------------------------------------------------------------
# batch normalization


@dataclass(eq=False)
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, name: str = "bn", dtype=None) -> "BatchNormState":
        dtype = dtype or get_default_dtype()
        return cls(
            gamma=Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype)),
            beta=Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.value.shape[0]


def batchnorm_forward(x, state: BatchNormState, training: bool):
    """Normalize per channel; returns ``(out, cache)``. ``cache`` is None in inference."""
    _, c, _, _ = check_tensor(x, "x")
    if c != state.channels:
        raise ShapeError(f"input has {c} channels, batch norm expects {state.channels}")
    gamma = state.gamma.value[None, :, None, None]
    beta = state.beta.value[None, :, None, None]
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return (gamma * xhat + beta).astype(x.dtype, copy=False), None

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std[None, :, None, None]
    out = gamma * xhat + beta

    mom = state.momentum
    unbiased = var * (m / (m - 1)) if m > 1 else var
    state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
    state.running_var[...] = mom * state.running_var + (1 - mom) * unbiased
    return out.astype(x.dtype, copy=False), (xhat, inv_std, state.gamma.value.copy())


def batchnorm_backward(upstream_grad, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)`` for a training-mode forward."""
    if cache is None:
        raise StateError("batch norm backward needs a training-mode forward")
    xhat, inv_std, gamma = cache
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_beta = upstream_grad.sum(axis=(0, 2, 3))
    grad_gamma = (upstream_grad * xhat).sum(axis=(0, 2, 3))
    dxhat = upstream_grad * gamma[None, :, None, None]
    grad_x = (
        inv_std[None, :, None, None]
        / m
        * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
    )
    return grad_x.astype(upstream_grad.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream_grad):
    return upstream_grad * (x > 0)


def softmax_channels(x):
    check_tensor(x, "logits")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs, upstream_grad):
    """Gradient wrt logits given softmax output and gradient wrt probabilities."""
    dot = (upstream_grad * probs).sum(axis=1, keepdims=True)
    return probs * (upstream_grad - dot)


# ---------------------------------------------------------------------------
# stateful layers


class Conv2d:
    def __init__(self, spec: ConvSpec, name: str, rng: np.random.Generator):
        self.spec = spec
        k = spec.kernel
        self.weight = Parameter(
            f"{name}.weight",
            he_init((spec.out_channels, spec.in_channels, k, k), spec.in_channels * k * k, rng),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_channels, dtype=get_default_dtype()))
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=True):
        out, cols = _conv_forward(x, self.weight.value, self.bias.value, self.spec.stride)
        self._cache = (x.shape, cols) if training else None
        return out

    def backward(self, dout):
        if self._cache is None:
            raise StateError(f"{self.weight.name}: backward called before a training forward")
        x_shape, cols = self._cache
        gx, gw, gb = _conv_backward(x_shape, cols, self.weight.value, dout, self.spec.stride)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Deconv2d:
    def __init__(self, in_channels: int, out_channels: int, name: str, rng: np.random.Generator):
        self.weight = Parameter(
            f"{name}.weight", he_init((in_channels, out_channels, 2, 2), in_channels, rng)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=get_default_dtype()))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training=True):
        out = deconv2d_forward(x, self.weight.value, self.bias.value)
        self._x = x if training else None
        return out

    def backward(self, dout):
        if self._x is None:
            raise StateError(f"{self.weight.name}: backward called before a training forward")
        gx, gw, gb = deconv2d_backward(self._x, self.weight.value, dout)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class BatchNorm2d:
    def __init__(self, channels: int, name: str):
        self.name = name
        self.state = BatchNormState.create(channels, name)
        self._cache = None

    def parameters(self):
        return [self.state.gamma, self.state.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}

    def forward(self, x, training=True):
        out, self._cache = batchnorm_forward(x, self.state, training)
        return out

    def backward(self, dout):
        gx, gg, gb = batchnorm_backward(dout, self._cache)
        self.state.gamma.grad += gg
        self.state.beta.grad += gb
        return gx


class ConvBNReLU:
    """conv -> batch norm -> (optional) relu."""

    def __init__(self, spec: ConvSpec, name: str, rng, activate=True):
        self.conv = Conv2d(spec, f"{name}.conv", rng)
        self.bn = BatchNorm2d(spec.out_channels, f"{name}.bn")
        self.activate = activate
        self._pre = None

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def forward(self, x, training=True):
        y = self.bn.forward(self.conv.forward(x, training), training)
        if not self.activate:
            return y
        self._pre = y if training else None
        return relu(y)

    def backward(self, dout):
        if self.activate:
            if self._pre is None:
                raise StateError(f"{self.conv.weight.name}: backward called before a training forward")
            dout = relu_backward(self._pre, dout)
        return self.conv.backward(self.bn.backward(dout))
