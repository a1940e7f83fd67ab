"""Dense float64 tensor primitives for forward/backward passes and attack math.

Tensors are C-contiguous float64 numpy arrays (NCHW for image batches). Every
public operation validates that its result is finite; NaN/Inf is raised as an
error instead of propagating silently.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "NonFiniteError",
    "as_tensor",
    "check_finite",
    "add",
    "sub",
    "mul",
    "scale",
    "sign",
    "clamp",
    "matmul",
    "conv2d_forward",
    "conv2d_backward",
    "channel_mean_center",
    "project_linf",
]

Tensor = np.ndarray


class NonFiniteError(ValueError):
    """A tensor operation produced NaN or Inf."""


def as_tensor(data, shape=None) -> Tensor:
    """Coerce to a C-contiguous float64 array, rejecting non-finite values."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        t = t.reshape(shape)
    return check_finite(t, "as_tensor")


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.isfinite(t).all():
        raise NonFiniteError(f"{where}: tensor contains NaN or Inf")
    return t


def _binary_shapes(a: Tensor, b, op: str):
    a = np.asarray(a, dtype=np.float64)
    if np.isscalar(b) or np.ndim(b) == 0:
        return a, float(b)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a: Tensor, b) -> Tensor:
    a, b = _binary_shapes(a, b, "add")
    return check_finite(a + b, "add")


def sub(a: Tensor, b) -> Tensor:
    a, b = _binary_shapes(a, b, "sub")
    return check_finite(a - b, "sub")


def mul(a: Tensor, b) -> Tensor:
    a, b = _binary_shapes(a, b, "mul")
    return check_finite(a * b, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return check_finite(np.asarray(a, dtype=np.float64) * float(c), "scale")


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(np.asarray(a, dtype=np.float64))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    return check_finite(np.clip(np.asarray(a, dtype=np.float64), lo, hi), "clamp")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expected rank-2 tensors, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def _check_conv_args(x: Tensor, kernels: Tensor, bias: Tensor):
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError("conv2d: input must be NCHW, kernels OCKK")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise ValueError(f"conv2d: input has {c} channels but kernels expect {ck}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    return kh // 2


def _pad_hw(t: Tensor, p: int) -> Tensor:
    return np.pad(t, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero padding (K-1)/2, preserving H and W.

    x: (N, C, H, W); kernels: (O, C, K, K); bias: (O,) -> out (N, O, H, W).
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    p = _check_conv_args(x, kernels, bias)
    cols = sliding_window_view(_pad_hw(x, p), kernels.shape[2:], axis=(2, 3))
    out = np.einsum("nchwuv,ocuv->nohw", cols, kernels, optimize=True)
    out += bias[None, :, None, None]
    return check_finite(out, "conv2d_forward")


def conv2d_backward(x: Tensor, kernels: Tensor, grad_out: Tensor):
    """Exact gradients of conv2d_forward w.r.t. input, kernels and bias.

    grad_out: (N, O, H, W). Returns (grad_x, grad_kernels, grad_bias).
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    o = kernels.shape[0]
    p = _check_conv_args(x, kernels, np.zeros(o))
    if grad_out.shape != (x.shape[0], o, x.shape[2], x.shape[3]):
        raise ValueError(f"conv2d_backward: grad_out shape {grad_out.shape} unexpected")

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    cols = sliding_window_view(_pad_hw(x, p), kernels.shape[2:], axis=(2, 3))
    grad_kernels = np.einsum("nohw,nchwuv->ocuv", grad_out, cols, optimize=True)
    # Input gradient is a full correlation of grad_out with spatially flipped kernels.
    gcols = sliding_window_view(_pad_hw(grad_out, p), kernels.shape[2:], axis=(2, 3))
    grad_x = np.einsum("nohwuv,ocuv->nchw", gcols, kernels[:, :, ::-1, ::-1], optimize=True)
    check_finite(grad_bias, "conv2d_backward")
    check_finite(grad_kernels, "conv2d_backward")
    return check_finite(grad_x, "conv2d_backward"), grad_kernels, grad_bias


def channel_mean_center(grad: Tensor) -> Tensor:
    """Subtract the per-(sample, channel) spatial mean from an NCHW gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 4:
        raise ValueError(f"channel_mean_center: expected rank-4 NCHW, got rank {grad.ndim}")
    return check_finite(grad - grad.mean(axis=(2, 3), keepdims=True), "channel_mean_center")


def project_linf(t: Tensor, eps: float) -> Tensor:
    """Project onto the L-inf ball of radius eps around zero (elementwise clamp)."""
    if eps < 0:
        raise ValueError(f"project_linf: eps must be >= 0, got {eps}")
    return clamp(t, -float(eps), float(eps))
