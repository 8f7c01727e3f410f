"""Primitive differentiable kernels.

Broadcasting is limited to scalars and row vectors (a 1-D tensor of length
``d`` against a ``T x d`` matrix); anything else must be reshaped explicitly.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor, TensorError, as_tensor, make_result


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    if shape == () or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    raise TensorError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.size == 1 or a.size == 1:
        return
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim == 2 and b.shape[1] == a.shape[0]:
        return
    raise TensorError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make_result(a.data + b, [a], lambda g: (g,), "add")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_result(
        a.data + b.data, [a, b],
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_result(
        a.data - b.data, [a, b],
        lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)), "sub",
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, [a], lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make_result(a.data * b, [a], lambda g: (g * b,), "mul")
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_result(
        a.data * b.data, [a, b],
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    return make_result(
        a.data @ b.data, [a, b], lambda g: (g @ b.data.T, a.data.T @ g), "matmul"
    )


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x: T x d_in``, ``w: d_in x d_out``, ``b: d_out``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise TensorError(f"linear: shape mismatch {x.shape} x {w.shape}")
    out = x.data @ w.data
    if b is None:
        return make_result(out, [x, w], lambda g: (g @ w.data.T, x.data.T @ g), "linear")
    out = out + b.data
    return make_result(
        out, [x, w, b],
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "linear",
    )


def total(x: Tensor) -> Tensor:
    return make_result(
        np.asarray(x.data.sum()), [x],
        lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum",
    )


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_result(
        np.asarray(x.data.mean()), [x],
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean",
    )


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, [x], lambda g: (2.0 * x.data * g,), "square")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        y = np.exp(x.data)
    return make_result(y, [x], lambda g: (g * y,), "exp")


def clamp_max(x: Tensor, hi: float) -> Tensor:
    """``min(x, hi)``; the gradient is zero where the cap is active."""
    keep = x.data < hi
    return make_result(np.where(keep, x.data, hi), [x], lambda g: (g * keep,), "clamp_max")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return make_result(
        x.data * s, [x], lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),), "silu"
    )


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    return make_result(y, [x], lambda g: (g * sigmoid_np(x.data),), "softplus")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_result(
        x.data.reshape(shape), [x], lambda g: (g.reshape(x.shape),), "reshape"
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise TensorError("transpose expects a matrix")
    return make_result(x.data.T.copy(), [x], lambda g: (g.T,), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return make_result(np.concatenate([x.data for x in xs], axis=axis), list(xs), bw, "concat")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), [x], bw, "slice_cols")


def chunk(x: Tensor, n: int) -> list[Tensor]:
    """Split columns into ``n`` equal parts."""
    d = x.shape[1]
    if d % n:
        raise TensorError(f"chunk: {d} columns not divisible by {n}")
    w = d // n
    return [slice_cols(x, i * w, (i + 1) * w) for i in range(n)]


def take_row(x: Tensor, i: int) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return make_result(x.data[i].copy(), [x], bw, "take_row")


def repeat_rows(v: Tensor, n: int) -> Tensor:
    """Broadcast a length-d vector to an ``n x d`` matrix."""
    if v.ndim != 1:
        raise TensorError("repeat_rows expects a vector")
    return make_result(
        np.tile(v.data, (n, 1)), [v], lambda g: (g.sum(axis=0),), "repeat_rows"
    )


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization without affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    d = x.shape[-1]

    def bw(g):
        gy_mean = g.mean(axis=-1, keepdims=True)
        gyy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gy_mean - y * gyy_mean),)

    if d < 1:
        raise TensorError("layer_norm needs d >= 1")
    return make_result(y, [x], bw, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s, [x], bw, "softmax")


def _reflect_index(n: int, left: int, right: int) -> np.ndarray:
    idx = np.arange(-left, n + right)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad_rows(x: Tensor, left: int, right: int, mode: str = "zeros") -> Tensor:
    """Pad the time axis of ``x: T x C`` with zeros, reflection or edge copies."""
    T = x.shape[0]
    if mode == "zeros":
        out = np.zeros((T + left + right,) + x.shape[1:], dtype=x.dtype)
        out[left:left + T] = x.data
        return make_result(out, [x], lambda g: (g[left:left + T],), "pad")
    if mode == "reflect":
        idx = _reflect_index(T, left, right)
    elif mode == "edge":
        idx = np.clip(np.arange(-left, T + right), 0, T - 1)
    else:
        raise TensorError(f"unknown pad mode {mode!r}")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result(x.data[idx], [x], bw, "pad")


def conv1d(
    x: Tensor,
    kernel: Tensor,
    padding: int = 0,
    stride: int = 1,
    mode: str = "zeros",
) -> Tensor:
    """1-D convolution over time: ``x: T x C_in``, ``kernel: K x C_in x C_out``.

    ``mode`` selects the padding values: ``"zeros"``, ``"reflect"`` (both
    sides, ``padding`` each) or ``"causal"`` (``K - 1`` zeros on the left,
    ``padding`` ignored).
    """
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise TensorError(f"conv1d: shape mismatch x={x.shape} kernel={kernel.shape}")
    if stride < 1:
        raise TensorError("conv1d: stride must be >= 1")
    K, C_in, C_out = kernel.shape
    T = x.shape[0]
    if mode == "causal":
        xp = pad_rows(x, K - 1, 0, "zeros")
    elif padding:
        xp = pad_rows(x, padding, padding, mode)
    else:
        xp = x
    Tp = xp.shape[0]
    if K > Tp:
        raise TensorError(f"conv1d: kernel size {K} exceeds padded length {Tp} (T={T})")
    T_out = (Tp - K) // stride + 1
    # cols[t, k, c] = xp[t*stride + k, c]
    win = np.lib.stride_tricks.sliding_window_view(xp.data, K, axis=0)[::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(T_out, K * C_in)
    w2 = kernel.data.reshape(K * C_in, C_out)
    out = cols @ w2

    def bw(g):
        gcols = (g @ w2.T).reshape(T_out, K, C_in)
        gxp = np.zeros_like(xp.data)
        stop = stride * (T_out - 1) + 1
        for k in range(K):
            gxp[k:k + stop:stride] += gcols[:, k, :]
        gw = (cols.T @ g).reshape(K, C_in, C_out)
        return gxp, gw

    return make_result(out, [xp, kernel], bw, "conv1d")


def depthwise_conv1d_causal(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel causal convolution: ``x: T x C``, ``w: K x C``."""
    K, C = w.shape
    if x.ndim != 2 or x.shape[1] != C:
        raise TensorError(f"depthwise conv: shape mismatch x={x.shape} w={w.shape}")
    T = x.shape[0]
    xp = np.zeros((T + K - 1, C), dtype=x.dtype)
    xp[K - 1:] = x.data
    out = np.zeros((T, C), dtype=x.dtype)
    for k in range(K):
        out += xp[k:k + T] * w.data[k]
    inputs = [x, w]
    if b is not None:
        out += b.data
        inputs.append(b)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for k in range(K):
            gxp[k:k + T] += g * w.data[k]
            gw[k] = (g * xp[k:k + T]).sum(axis=0)
        grads = [gxp[K - 1:], gw]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, inputs, bw, "depthwise_conv1d")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is a constant array or tensor."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise TensorError(f"mse: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return make_result(
        np.asarray((diff * diff).mean()), [pred],
        lambda g: (g * 2.0 * diff / n,), "mse",
    )
