"""Forward and input-gradient kernels for the supported layer types.

All kernels are pure functions on ndarrays. Inputs are upcast to float64
and results stay float64; callers round to float32 at API boundaries.
Convolution uses an im2col layout so the heavy lifting is one matmul.
The `*_apply` variants take raw weight arrays, which lets relevance
rules run the same machinery with sign-split or flattened weights.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import BnParams, ConvParams, DenseParams, PoolParams, ShapeError, as_array64


def _check_rank4(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 [N, C, H, W], got shape {x.shape}")


def _pad_spatial(x: np.ndarray, padding: tuple[int, int], value: float = 0.0) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv_output_hw(hw, kernel, stride, padding) -> tuple[int, int]:
    h = (hw[0] + 2 * padding[0] - kernel[0]) // stride[0] + 1
    w = (hw[1] + 2 * padding[1] - kernel[1]) // stride[1] + 1
    if h < 1 or w < 1:
        raise ShapeError(
            f"window {tuple(kernel)} with stride {tuple(stride)}, padding {tuple(padding)} "
            f"does not fit input of spatial size {tuple(hw)}"
        )
    return h, w


def conv2d_apply(x: np.ndarray, weight: np.ndarray, bias, stride, padding) -> np.ndarray:
    """Convolution with raw float64 arrays; bias may be a vector or scalar 0."""
    _check_rank4(x, "conv input")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kh, kw = weight.shape[2:]
    sh, sw = stride
    ho, wo = conv_output_hw(x.shape[2:], (kh, kw), stride, padding)
    xp = _pad_spatial(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * ho * wo, -1)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(x.shape[0], ho, wo, weight.shape[0]).transpose(0, 3, 1, 2)


def conv2d_transpose_apply(gy: np.ndarray, weight: np.ndarray, stride, padding, input_shape) -> np.ndarray:
    """Gradient of sum(gy * conv2d_apply(x, weight, ...)) with respect to x."""
    _check_rank4(gy, "conv output_grad")
    n, ci, h, w = input_shape
    kh, kw = weight.shape[2:]
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_output_hw((h, w), (kh, kw), stride, padding)
    if gy.shape != (n, weight.shape[0], ho, wo):
        raise ShapeError(
            f"conv output_grad shape {gy.shape} != expected {(n, weight.shape[0], ho, wo)}"
        )
    gxp = np.zeros((n, ci, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += np.einsum(
                "nohw,oc->nchw", gy, weight[:, :, i, j]
            )
    return gxp[:, :, ph : ph + h, pw : pw + w]


def conv2d_forward(x, p: ConvParams) -> np.ndarray:
    return conv2d_apply(as_array64(x), p.weight.astype64(), p.bias.astype64(), p.stride, p.padding)


def conv2d_input_grad(output_grad, p: ConvParams, input_shape) -> np.ndarray:
    return conv2d_transpose_apply(
        as_array64(output_grad), p.weight.astype64(), p.stride, p.padding, tuple(input_shape)
    )


def dense_apply(x: np.ndarray, weight: np.ndarray, bias) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"dense input must be rank 2 [N, in], got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    return x @ weight.T + bias


def dense_transpose_apply(gy: np.ndarray, weight: np.ndarray) -> np.ndarray:
    if gy.ndim != 2 or gy.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense output_grad shape {gy.shape} incompatible with weight {weight.shape}")
    return gy @ weight


def dense_forward(x, p: DenseParams) -> np.ndarray:
    return dense_apply(as_array64(x), p.weight.astype64(), p.bias.astype64())


def dense_input_grad(output_grad, p: DenseParams) -> np.ndarray:
    return dense_transpose_apply(as_array64(output_grad), p.weight.astype64())


def bn_forward(x, p: BnParams) -> np.ndarray:
    x = as_array64(x)
    if x.ndim < 2 or x.shape[1] != p.channels:
        raise ShapeError(
            f"bn input with shape {x.shape} does not carry {p.channels} channels on axis 1"
        )
    bshape = (1, p.channels) + (1,) * (x.ndim - 2)
    scale = p.scale().reshape(bshape)
    mean = p.running_mean.astype64().reshape(bshape)
    beta = p.beta.astype64().reshape(bshape)
    return (x - mean) * scale + beta


def bn_input_grad(output_grad, p: BnParams) -> np.ndarray:
    gy = as_array64(output_grad)
    bshape = (1, p.channels) + (1,) * (gy.ndim - 2)
    return gy * p.scale().reshape(bshape)


def relu_forward(x) -> np.ndarray:
    return np.maximum(as_array64(x), 0.0)


def relu_backward(output_grad, forward_input, mode: str = "standard") -> np.ndarray:
    gy = as_array64(output_grad)
    x = as_array64(forward_input)
    if gy.shape != x.shape:
        raise ShapeError(f"relu grad shape {gy.shape} != input shape {x.shape}")
    gx = np.where(x > 0, gy, 0.0)
    if mode == "guided":
        gx = np.where(gy > 0, gx, 0.0)
    elif mode != "standard":
        raise ValueError(f"unknown relu backward mode {mode!r}")
    return gx


def _pool_windows(x: np.ndarray, p: PoolParams, pad_value: float):
    xp = _pad_spatial(x, p.padding, pad_value)
    win = sliding_window_view(xp, p.kernel, axis=(2, 3))
    return win[:, :, :: p.stride[0], :: p.stride[1]]


def maxpool2d_forward(x, p: PoolParams) -> np.ndarray:
    x = as_array64(x)
    _check_rank4(x, "maxpool input")
    conv_output_hw(x.shape[2:], p.kernel, p.stride, p.padding)
    return _pool_windows(x, p, -np.inf).max(axis=(4, 5))


def maxpool2d_backward(output_grad, forward_input, p: PoolParams) -> np.ndarray:
    """Route each output gradient to its window argmax (lowest flat index on ties)."""
    gy = as_array64(output_grad)
    x = as_array64(forward_input)
    n, c, h, w = x.shape
    ho, wo = conv_output_hw((h, w), p.kernel, p.stride, p.padding)
    if gy.shape != (n, c, ho, wo):
        raise ShapeError(f"maxpool output_grad shape {gy.shape} != {(n, c, ho, wo)}")
    win = _pool_windows(x, p, -np.inf).reshape(n, c, ho, wo, -1)
    am = win.argmax(axis=-1)
    kh, kw = p.kernel
    oh_idx, ow_idx = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oh_idx[None, None] * p.stride[0] + am // kw
    cols = ow_idx[None, None] * p.stride[1] + am % kw
    gxp = np.zeros((n, c, h + 2 * p.padding[0], w + 2 * p.padding[1]))
    nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    nn = nn[:, :, None, None]
    cc = cc[:, :, None, None]
    np.add.at(gxp, (nn, cc, rows, cols), gy)
    return gxp[:, :, p.padding[0] : p.padding[0] + h, p.padding[1] : p.padding[1] + w]


def avgpool2d_forward(x, p: PoolParams) -> np.ndarray:
    x = as_array64(x)
    _check_rank4(x, "avgpool input")
    if p.padding != (0, 0):
        raise ShapeError("avgpool does not support padding")
    conv_output_hw(x.shape[2:], p.kernel, p.stride, p.padding)
    return _pool_windows(x, p, 0.0).mean(axis=(4, 5))


def avgpool2d_backward(output_grad, input_shape, p: PoolParams) -> np.ndarray:
    gy = as_array64(output_grad)
    n, c, h, w = input_shape
    ho, wo = conv_output_hw((h, w), p.kernel, p.stride, p.padding)
    if gy.shape != (n, c, ho, wo):
        raise ShapeError(f"avgpool output_grad shape {gy.shape} != {(n, c, ho, wo)}")
    kh, kw = p.kernel
    sh, sw = p.stride
    gx = np.zeros((n, c, h, w))
    share = gy / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + ho * sh : sh, j : j + wo * sw : sw] += share
    return gx


def add_forward(a, b) -> np.ndarray:
    a = as_array64(a)
    b = as_array64(b)
    if a.shape != b.shape:
        raise ShapeError(f"add operand shapes differ: {a.shape} vs {b.shape}")
    return a + b


def flatten_forward(x) -> np.ndarray:
    x = as_array64(x)
    return x.reshape(x.shape[0], -1)
