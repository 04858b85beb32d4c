"""Differentiable ops on :class:`Tensor`.

Every op computes its forward with numpy in the dtype of its inputs and, when
a tape is active and an input requires a gradient, records a closure that
maps the upstream gradient to one gradient per input.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from oxygan.errors import DegenerateVarianceError, ParameterError, ShapeError
from oxygan.tensor_core.tensor import Tensor, as_tensor, recording_tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(op, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    tape = recording_tape(*inputs)
    if tape is not None:
        tape.record(op, tuple(inputs), out, backward)
    return out


# --------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    return _emit("add", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    return _emit("sub", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data
    return _emit("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def abs_(a: Tensor) -> Tensor:
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=a.dtype)
    return _emit("sum", (a,), np.asarray(out), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean(dtype=a.dtype)
    scale = a.dtype.type(1.0 / n)
    return _emit("mean", (a,), np.asarray(out),
                 lambda g: (np.full(a.shape, g * scale, dtype=a.dtype),))


# -------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    s = x.dtype.type(slope)
    out = np.where(pos, x.data, x.data * s)
    # derivative at exactly 0 is the slope
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(pos, g, g * s),))


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    half = v.dtype.type(0.5)
    return half * (np.tanh(half * v) + 1)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    out = np.logaddexp(x.dtype.type(0), x.data)
    return _emit("softplus", (x,), out, lambda g: (g * _sigmoid(x.data),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, active: bool) -> Tensor:
    """Inverted dropout. ``active=False`` is the identity for any ``p``."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not active or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _emit("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ------------------------------------------------------------- shape plumbing

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError("concat_channels needs matching N, H, W", a.shape, b.shape)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice", (x,), x.data[:, start:stop].copy(), back)


# ---------------------------------------------------------------- convolution

def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> strided view (N, C, out_h, out_w, k, k)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :out_h, :out_w]


def _cols(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int, per_sample: bool) -> np.ndarray:
    """Patch columns: (N, C*k*k, out_h*out_w) per sample, else (C*k*k, N*out_h*out_w)."""
    n, c = xp.shape[:2]
    win = _windows(xp, k, stride, out_h, out_w)
    if per_sample:
        return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, -1)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, -1)


def _fold(d: np.ndarray, padded_shape, k: int, stride: int, out_h: int, out_w: int,
          per_sample: bool) -> np.ndarray:
    """Adjoint of :func:`_cols`: scatter-add columns into a padded NCHW image."""
    n, c = padded_shape[:2]
    if per_sample:
        d = d.reshape(n, c, k, k, out_h, out_w)
        img = np.zeros(padded_shape, dtype=d.dtype)
    else:
        d = d.reshape(c, k, k, n, out_h, out_w).transpose(3, 0, 1, 2, 4, 5)
        img = np.zeros((c, n) + tuple(padded_shape[2:]), dtype=d.dtype).transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            img[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += d[:, :, i, j]
    return img


def _to_flat(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_flat(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) -> (N, C, H, W) view."""
    return a.reshape(-1, n, h, w).transpose(1, 0, 2, 3)


_kernel_mode = threading.local()


@contextlib.contextmanager
def batch_invariant():
    """Within this block, convolutions run one GEMM per sample.

    BLAS blocking depends on the matrix shape, so a flattened batch GEMM can
    round a sample differently depending on its batch mates. Inference that
    must be bitwise independent of batch size runs inside this context.
    """
    prev = getattr(_kernel_mode, "per_sample", False)
    _kernel_mode.per_sample = True
    try:
        yield
    finally:
        _kernel_mode.per_sample = prev


def _per_sample() -> bool:
    return getattr(_kernel_mode, "per_sample", False)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_conv_args(stride: int, padding: int) -> None:
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK weight."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1] \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d input/weight mismatch", x.shape, weight.shape)
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    if bias is not None and bias.shape != (o,):
        raise ShapeError("conv2d bias mismatch", bias.shape, (o,))
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d kernel larger than padded input", x.shape, weight.shape)

    xp = _pad(x.data, padding)
    wmat = weight.data.reshape(o, -1)
    # a 1x1 output makes the flattened GEMM skinny; per-sample is faster there
    per_sample = _per_sample() or out_h * out_w == 1
    cols = _cols(xp, k, stride, out_h, out_w, per_sample)
    if per_sample:
        out = np.matmul(wmat, cols).reshape(n, o, out_h, out_w)
    else:
        out = np.ascontiguousarray(_from_flat(wmat @ cols, n, out_h, out_w))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gx = gw = gb = None
        if per_sample:
            gf = g.reshape(n, o, -1)
            if x.requires_grad:
                gx = _fold(np.matmul(wmat.T, gf), xp.shape, k, stride, out_h, out_w, True)
            if weight.requires_grad:
                gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        else:
            gf = _to_flat(g)
            if x.requires_grad:
                gx = _fold(wmat.T @ gf, xp.shape, k, stride, out_h, out_w, False)
            if weight.requires_grad:
                gw = (gf @ cols.T).reshape(weight.shape)
        if gx is not None:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv2d", inputs, out, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is laid out (C_in, C_out, K, K).

    The forward pass is exactly conv2d's input-gradient computation.
    """
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[0] \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv_transpose2d input/weight mismatch", x.shape, weight.shape)
    n, cin, h, w = x.shape
    _, cout, k, _ = weight.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv_transpose2d bias mismatch", bias.shape, (cout,))
    out_h = (h - 1) * stride - 2 * padding + k
    out_w = (w - 1) * stride - 2 * padding + k
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d produces an empty output", x.shape, weight.shape)

    padded_shape = (n, cout, out_h + 2 * padding, out_w + 2 * padding)
    wmat = weight.data.reshape(cin, -1)
    per_sample = _per_sample() or h * w == 1
    if per_sample:
        xs = x.data.reshape(n, cin, -1)
        out = _fold(np.matmul(wmat.T, xs), padded_shape, k, stride, h, w, True)
    else:
        xs = _to_flat(x.data)
        out = _fold(wmat.T @ xs, padded_shape, k, stride, h, w, False)
    out = out[:, :, padding:padding + out_h, padding:padding + out_w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gcols = _cols(_pad(g, padding), k, stride, h, w, per_sample)
        gx = gw = gb = None
        if per_sample:
            if x.requires_grad:
                gx = np.matmul(wmat, gcols).reshape(n, cin, h, w)
            if weight.requires_grad:
                gw = np.matmul(xs, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        else:
            if x.requires_grad:
                gx = _from_flat(wmat @ gcols, n, h, w)
            if weight.requires_grad:
                gw = (xs @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv_transpose2d", inputs, out, back)


# -------------------------------------------------------------- normalization

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> RunningStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], eps: float,
               op: str, mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """Affine normalization; batch statistics over ``axes`` unless mean/var given."""
    xd = x.data
    dt = xd.dtype.type
    bshape = (1, -1, 1, 1)
    use_batch = mean is None
    if use_batch:
        mean = xd.mean(axis=axes, keepdims=True, dtype=xd.dtype)
        var = ((xd - mean) ** 2).mean(axis=axes, keepdims=True, dtype=xd.dtype)
    else:
        mean = mean.reshape(bshape).astype(xd.dtype)
        var = var.reshape(bshape).astype(xd.dtype)
    inv = dt(1) / np.sqrt(var + dt(eps))
    xhat = (xd - mean) * inv
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    m = int(np.prod([xd.shape[a] for a in axes]))

    def back(g):
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if use_batch:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv / dt(m) * (dt(m) * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _emit(op, (x, gamma, beta), out, back)


def _check_norm_args(x: Tensor, gamma: Tensor, beta: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} needs an NCHW input", x.shape)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"{op} affine parameters do not match channels", gamma.shape, x.shape)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None,
                 training: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and
    ``running`` is updated in place (unbiased variance, exponential
    momentum). In eval mode ``running`` is used as-is.
    """
    _check_norm_args(x, gamma, beta, "batch_norm2d")
    n, _, h, w = x.shape
    if not training:
        return _normalize(x, gamma, beta, (0, 2, 3), eps, "batch_norm2d", running.mean, running.var)
    m = n * h * w
    if m <= 1:
        raise DegenerateVarianceError(
            f"batch_norm2d in training mode needs more than one value per channel, got dims {x.dims}")
    out = _normalize(x, gamma, beta, (0, 2, 3), eps, "batch_norm2d")
    if running is not None:
        xd = x.data
        mom = running.mean.dtype.type(running.momentum)
        bmean = xd.mean(axis=(0, 2, 3), dtype=xd.dtype).astype(running.mean.dtype)
        bvar = xd.var(axis=(0, 2, 3), ddof=1, dtype=xd.dtype).astype(running.var.dtype)
        running.mean *= 1 - mom
        running.mean += mom * bmean
        running.var *= 1 - mom
        running.var += mom * bvar
    return out


def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over H and W."""
    _check_norm_args(x, gamma, beta, "instance_norm2d")
    if x.shape[2] * x.shape[3] <= 1:
        raise DegenerateVarianceError(
            f"instance_norm2d needs more than one pixel per channel, got dims {x.dims}")
    return _normalize(x, gamma, beta, (2, 3), eps, "instance_norm2d")


__all__ = [
    "RunningStats", "batch_invariant", "abs_", "add", "batch_norm2d", "concat_channels", "conv2d", "conv_transpose2d",
    "dropout", "instance_norm2d", "leaky_relu", "mean_all", "mul", "neg", "relu", "sigmoid",
    "slice_channels", "softplus", "sub", "sum_all", "tanh_act",
]
