"""Dense-array substrate shared by the attention kernels and the toy U-net.

Arrays are plain :class:`numpy.ndarray` objects in row-major order with the
channel axis slowest (``[C, H, W]`` for a feature map, ``[N, C, H, W]`` for a
batch).  Float64 is the default dtype; float32 inputs are preserved.

Matrix products go through :func:`matmul`, which has two backends:

``"exact"`` (default)
    accumulates over the inner dimension in a fixed ``k = 0 .. K-1`` order with
    a separate multiply and add per term, so results are bitwise identical to a
    scalar triple loop.
``"blas"``
    hands the product to numpy/BLAS.  Deterministic for a fixed thread count,
    but the summation order is the library's.  Used for benchmarks and
    training where the exact path is too slow.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

Tensor = np.ndarray
FeatureMap = np.ndarray

BACKENDS = ("exact", "blas")
_backend = "exact"


class ShapeError(ValueError):
    """Raised when array shapes do not satisfy an operation's contract."""


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown matmul backend {name!r}; expected one of {BACKENDS}")
    _backend = name


@contextlib.contextmanager
def backend(name: str) -> Iterator[None]:
    """Temporarily switch the matmul backend (not thread-local)."""
    previous = get_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def as_feature_map(x) -> FeatureMap:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"feature map must have shape [C,H,W] with C,H,W >= 1, got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def is_finite(a) -> bool:
    return bool(np.isfinite(a).all())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``c[i, j] = sum_k a[i, k] * b[k, j]`` for rank-2 operands."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if _backend == "blas":
        return a @ b
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a.dtype, b.dtype, np.float32))
    for kk in range(k):
        out += np.multiply.outer(a[:, kk], b[kk])
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 array, got shape {a.shape}")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv1x1(x: FeatureMap, weights: Tensor, bias: Tensor) -> FeatureMap:
    """Pointwise channel mixing: ``out[o] = bias[o] + sum_c weights[o, c] * x[c]``."""
    x = as_feature_map(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    c, h, w = x.shape
    if weights.ndim != 2 or weights.shape[1] != c:
        raise ShapeError(f"conv1x1 weights {weights.shape} do not match {c} input channels")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"conv1x1 bias {bias.shape} does not match {weights.shape[0]} outputs")
    out = matmul(weights, x.reshape(c, h * w)) + bias[:, None]
    return out.reshape(weights.shape[0], h, w)


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def conv3x3(x, weights, bias, return_cols: bool = False):
    """3x3 convolution with zero padding 1; spatial size is preserved.

    ``weights`` has shape ``[C_out, C_in, 3, 3]``.  Accepts ``[C,H,W]`` or
    ``[N,C,H,W]`` input.  With ``return_cols=True`` also returns the im2col
    matrix needed by :func:`conv3x3_backward`.
    """
    x = np.asarray(x)
    xb, squeeze = _batched(x)
    weights = np.asarray(weights)
    n, c, h, w = xb.shape
    if weights.ndim != 4 or weights.shape[1:] != (c, 3, 3):
        raise ShapeError(f"conv3x3 weights {weights.shape} do not match {c} input channels")
    co = weights.shape[0]
    cols = _im2col3x3(xb)
    out = matmul(weights.reshape(co, c * 9), cols) + np.asarray(bias)[:, None]
    out = out.reshape(co, n, h, w).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if squeeze else out)
    if return_cols:
        return out, cols
    return out


def conv3x3_backward(grad_out, x_shape, weights, cols):
    """Gradients of :func:`conv3x3` w.r.t. input, weights and bias."""
    g, squeeze = _batched(np.asarray(grad_out))
    n, co, h, w = g.shape
    c = weights.shape[1]
    g2 = g.transpose(1, 0, 2, 3).reshape(co, n * h * w)
    grad_w = matmul(g2, cols.T).reshape(weights.shape)
    grad_b = g2.sum(axis=1)
    gcols = matmul(weights.reshape(co, c * 9).T, g2).reshape(c, 3, 3, n, h, w)
    gxp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
    for dy in range(3):
        for dx in range(3):
            gxp[:, :, dy:dy + h, dx:dx + w] += gcols[:, dy, dx].transpose(1, 0, 2, 3)
    grad_x = gxp[:, :, 1:-1, 1:-1]
    grad_x = np.ascontiguousarray(grad_x[0] if squeeze else grad_x)
    if grad_x.shape != tuple(x_shape):
        raise ShapeError(f"gradient shape {grad_x.shape} does not match input {tuple(x_shape)}")
    return grad_x, grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def batchnorm2d(x, gamma, beta, running_mean, running_var, *, training: bool,
                momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalisation over the batch and spatial axes.

    In training mode the batch statistics normalise ``x`` and the running
    estimates are updated in place (unbiased variance, PyTorch convention).
    In eval mode the running estimates are used.  Returns ``(out, cache)``.
    """
    xb, squeeze = _batched(np.asarray(x))
    shape = (1, -1, 1, 1)
    if training:
        mean = xb.mean(axis=(0, 2, 3))
        var = xb.var(axis=(0, 2, 3))
        count = xb.shape[0] * xb.shape[2] * xb.shape[3]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xb - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * np.asarray(gamma).reshape(shape) + np.asarray(beta).reshape(shape)
    cache = (xhat, inv_std, np.asarray(gamma), training, squeeze)
    return (out[0] if squeeze else out), cache


def batchnorm2d_backward(grad_out, cache):
    xhat, inv_std, gamma, training, squeeze = cache
    g, _ = _batched(np.asarray(grad_out))
    shape = (1, -1, 1, 1)
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    grad_beta = g.sum(axis=(0, 2, 3))
    gxhat = g * gamma.reshape(shape)
    if training:
        count = g.shape[0] * g.shape[2] * g.shape[3]
        grad_x = (inv_std.reshape(shape) / count) * (
            count * gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        grad_x = gxhat * inv_std.reshape(shape)
    return (grad_x[0] if squeeze else grad_x), grad_gamma, grad_beta


def maxpool2x2(x):
    """2x2 max pooling with stride 2; spatial dims must be even."""
    x = np.asarray(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(*lead, h // 2, 2, w // 2, 2)
    return windows.max(axis=(-3, -1))


def maxpool2x2_backward(grad_out, x):
    """Routes each pooled gradient to the first maximal element of its window."""
    x = np.asarray(x)
    *lead, h, w = x.shape
    win = x.reshape(*lead, h // 2, 2, w // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    mask = np.zeros_like(win)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    g = mask * np.asarray(grad_out)[..., None]
    g = g.reshape(*lead, h // 2, w // 2, 2, 2)
    return np.moveaxis(g, -3, -2).reshape(*lead, h, w)


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return np.repeat(np.repeat(np.asarray(x), 2, axis=-2), 2, axis=-1)


def upsample2x_backward(grad_out):
    g = np.asarray(grad_out)
    *lead, h, w = g.shape
    return g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))
