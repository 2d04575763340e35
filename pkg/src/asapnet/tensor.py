"""Dense NCHW operators with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of shape (batch, channels,
height, width). Every operator is a pure function; the backward of each
op takes the forward inputs (or a small cache) plus the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from asapnet.errors import ConfigurationError

HIGH_PRECISION = np.float64
SINGLE_PRECISION = np.float32

IN_EPS = 1e-8


def check_4d(x: np.ndarray, name: str = "tensor") -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


@dataclass
class Conv2dParams:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    stride: int = 1
    padding: int = 0

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        p, s = self.padding, self.stride
        return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1


def _check_conv(x: np.ndarray, layer: Conv2dParams) -> None:
    check_4d(x, "conv input")
    if layer.weight.ndim != 4:
        raise ConfigurationError(f"conv weight must be 4-D, got {layer.weight.shape}")
    if layer.bias.shape != (layer.out_channels,):
        raise ConfigurationError(
            f"conv bias shape {layer.bias.shape} does not match {layer.out_channels} output channels"
        )
    if x.shape[1] != layer.in_channels:
        raise ConfigurationError(
            f"conv expects {layer.in_channels} input channels, got {x.shape[1]}"
        )
    if layer.stride < 1 or layer.padding < 0:
        raise ConfigurationError(f"invalid stride/padding {layer.stride}/{layer.padding}")
    kh, kw = layer.weight.shape[2:]
    h, w = x.shape[2:]
    if h + 2 * layer.padding < kh or w + 2 * layer.padding < kw:
        raise ConfigurationError(
            f"padded input {h}x{w} (padding {layer.padding}) smaller than kernel {kh}x{kw}"
        )


def _windows(x: np.ndarray, layer: Conv2dParams) -> np.ndarray:
    p, s = layer.padding, layer.stride
    kh, kw = layer.weight.shape[2:]
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = layer.output_hw(x.shape[2] - 2 * p, x.shape[3] - 2 * p)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]  # (N, C, Ho, Wo, kh, kw)


def conv2d_forward(x: np.ndarray, layer: Conv2dParams) -> np.ndarray:
    """Zero-padded cross-correlation plus bias."""
    _check_conv(x, layer)
    win = _windows(x, layer)
    out = np.tensordot(win, layer.weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out += layer.bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray, layer: Conv2dParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_input, grad_weight, grad_bias)."""
    _check_conv(x, layer)
    n, _, h, w = x.shape
    ho, wo = layer.output_hw(h, w)
    expected = (n, layer.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ConfigurationError(f"grad_out shape {grad_out.shape} != forward output {expected}")

    win = _windows(x, layer)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    p, s = layer.padding, layer.stride
    kh, kw = layer.weight.shape[2:]
    cols = np.tensordot(grad_out, layer.weight, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    gxp = np.zeros((n, x.shape[1], h + 2 * p, w + 2 * p), dtype=np.result_type(x, grad_out))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def bilinear_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Cell-center bilinear resampling by an integer factor.

    On factor-aligned grids this is the mean over each factor x factor cell.
    """
    check_4d(x)
    if factor < 1:
        raise ConfigurationError(f"downsampling factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ConfigurationError(f"extents {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return x.copy()
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def bilinear_downsample_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad_out.copy()
    g = grad_out / (factor * factor)
    return np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)


def nearest_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every pixel over a factor x factor block: out[y, x] = in[y // f, x // f]."""
    check_4d(x)
    if factor < 1:
        raise ConfigurationError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def nearest_upsample_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of replication: sum each block."""
    check_4d(grad_out)
    n, c, h, w = grad_out.shape
    if h % factor or w % factor:
        raise ConfigurationError(f"gradient extents {h}x{w} not divisible by factor {factor}")
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x).astype(x.dtype, copy=False)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, grad_out, slope * grad_out).astype(grad_out.dtype, copy=False)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward given the forward *output* y = tanh(x)."""
    return grad_out * (1 - y * y)


def instance_norm(x: np.ndarray, eps: float = IN_EPS) -> tuple[np.ndarray, tuple]:
    """Per-(sample, channel) normalization over space, no affine part.

    Returns the output and a cache for :func:`instance_norm_backward`.
    """
    check_4d(x)
    if x.shape[2] * x.shape[3] < 2:
        raise ConfigurationError(f"instance norm needs >= 2 spatial elements, got {x.shape[2:]}")
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = xc * inv_std
    return y, (y, inv_std)


def instance_norm_backward(cache: tuple, grad_out: np.ndarray) -> np.ndarray:
    y, inv_std = cache
    g_mean = grad_out.mean(axis=(2, 3), keepdims=True)
    gy_mean = (grad_out * y).mean(axis=(2, 3), keepdims=True)
    return inv_std * (grad_out - g_mean - y * gy_mean)


def pointwise(x: np.ndarray, kind: str, slope: float = 0.2) -> np.ndarray:
    """Dispatch by name: relu, leaky_relu, tanh or instance_norm."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "instance_norm":
        return instance_norm(x)[0]
    raise ConfigurationError(f"unknown pointwise op {kind!r}")


def pointwise_backward(x: np.ndarray, grad_out: np.ndarray, kind: str, slope: float = 0.2) -> np.ndarray:
    if kind == "relu":
        return relu_backward(x, grad_out)
    if kind == "leaky_relu":
        return leaky_relu_backward(x, grad_out, slope)
    if kind == "tanh":
        return tanh_backward(np.tanh(x), grad_out)
    if kind == "instance_norm":
        return instance_norm_backward(instance_norm(x)[1], grad_out)
    raise ConfigurationError(f"unknown pointwise op {kind!r}")
