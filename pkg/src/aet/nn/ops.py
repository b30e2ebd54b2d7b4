"""Differentiable operations used by the NIN encoder, probe heads and losses."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, LabelOutOfRange, ShapeMismatch
from .tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                       "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return make_result(out, (x,), lambda g: (g * (out > 0),), "relu")


def _colsum(a: np.ndarray) -> np.ndarray:
    # a GEMV reduction is several times faster than sum(axis=0) on tall arrays
    return np.ones(a.shape[0]) @ a


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"linear: bias {bias.shape} vs {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gb = g.sum(axis=0) if bias is not None else None
        return (g @ weight.data, g.T @ x.data, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "linear")


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeMismatch(f"concat: rank {a.ndim} vs {b.ndim}")
    ax = axis % a.ndim
    for i, (m, n) in enumerate(zip(a.shape, b.shape)):
        if i != ax and m != n:
            raise ShapeMismatch(f"concat: {a.shape} vs {b.shape} along axis {axis}")
    split = a.shape[ax]

    def bw(g):
        ga, gb = np.split(g, [split], axis=ax)
        return (ga, gb)

    return make_result(np.concatenate([a.data, b.data], axis=ax), (a, b), bw, "concat")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def to_nhwc(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def to_nchw(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def _check_4d(x, op):
    if x.ndim != 4:
        raise ShapeMismatch(f"{op} expects a 4-d input, got {x.shape}")


def avg_pool_global(x: Tensor, channels_last: bool = False) -> Tensor:
    """Mean over the spatial axes: ``(N, C, H, W) -> (N, C)``."""
    _check_4d(x, "avg_pool_global")
    axes = (1, 2) if channels_last else (2, 3)
    hw = x.shape[axes[0]] * x.shape[axes[1]]

    def bw(g):
        gx = (g / hw)[:, None, None, :] if channels_last else (g / hw)[:, :, None, None]
        return (np.broadcast_to(gx, x.shape).copy(),)

    return make_result(x.data.mean(axis=axes), (x,), bw, "avg_pool_global")


def avg_pool2d(x: Tensor, k: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping ``k x k`` average pooling (trailing rows/cols dropped)."""
    _check_4d(x, "avg_pool2d")
    if not channels_last:
        return to_nchw(avg_pool2d(to_nhwc(x), k, channels_last=True))
    n, h, w, c = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"avg_pool2d: {h}x{w} map smaller than window {k}")
    view = x.data[:, : ho * k, : wo * k, :].reshape(n, ho, k, wo, k, c)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, : ho * k, : wo * k, :] = np.broadcast_to(
            (g / (k * k))[:, :, None, :, None, :], (n, ho, k, wo, k, c)
        ).reshape(n, ho * k, wo * k, c)
        return (gx,)

    return make_result(view.mean(axis=(2, 4)), (x,), bw, "avg_pool2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           channels_last: bool = False) -> Tensor:
    """Cross-correlation with ``(K, C, kh, kw)`` filters.

    Input is ``(N, C, H, W)``, or ``(N, H, W, C)`` when ``channels_last``; the
    output uses the same layout.
    """
    if not channels_last:
        _check_4d(x, "conv2d")
        return to_nchw(conv2d(to_nhwc(x), weight, bias, stride, padding, channels_last=True))
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, weight {weight.shape}")
    n, h, w, c = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} vs {k} filters")
    hp, wp = h + 2 * padding, w + 2 * padding
    if (hp - kh) % stride or (wp - kw) % stride or hp < kh or wp < kw:
        raise ShapeMismatch(f"conv2d: {h}x{w} input with kernel {kh}x{kw}, stride {stride}, padding {padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    # im2col with rows ordered (n, y, x) and columns ordered (ky, kx, c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(k, kh * kw * c)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n * h * w, c)
        xp = None
    else:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, k)

    def bw(g):
        gmat = g.reshape(n * ho * wo, k)
        gw = (gmat.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
        gb = _colsum(gmat) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            if xp is None:
                gx = gcols.reshape(n, h, w, c)
            else:
                gcols = gcols.reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros((n, hp, wp, c))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
        return (gx, np.ascontiguousarray(gw), gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS, channels_last: bool = False) -> Tensor:
    """Per-channel normalization of ``(N, C)`` or ``(N, C, H, W)`` input.

    In training mode the batch statistics are used and the running buffers are
    updated in place (the variance buffer tracks the unbiased estimate).
    ``channels_last`` accepts ``(N, H, W, C)`` maps instead.
    """
    if x.ndim not in (2, 4):
        raise ShapeMismatch(f"batch_norm expects (N, C) or a 4-d map, got {x.shape}")
    if x.ndim == 4 and not channels_last:
        return to_nchw(batch_norm(to_nhwc(x), gamma, beta, running_mean, running_var, training,
                                  momentum, eps, channels_last=True))
    c = x.shape[-1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeMismatch(f"batch_norm: {name} {t.shape} vs {c} channels")
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]

    if training:
        if m <= 1:
            raise DegenerateBatch(f"batch_norm needs more than one value per channel, got {m}")
        mean = _colsum(flat) / m
        xhat = flat - mean
        var = _colsum(xhat * xhat) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean.copy(), running_var.copy()
        xhat = flat - mean

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        g = g.reshape(-1, c)
        gbeta = _colsum(g)
        ggamma = _colsum(g * xhat)
        scale = gamma.data * inv_std
        gx = g * scale
        if training:
            # d/dx of the batch statistics, using sum(g*gamma) and sum(g*gamma*xhat)
            gx -= xhat * (scale * ggamma / m)
            gx -= scale * gbeta / m
        return (gx.reshape(x.shape), ggamma, gbeta)

    return make_result(out.reshape(x.shape), (x, gamma, beta), bw, "batch_norm")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeMismatch("softmax_cross_entropy: empty batch")
    if np.any(labels < 0) or np.any(labels >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss), (logits,), bw, "softmax_cross_entropy")


def regression_loss(predicted: Tensor, target) -> Tensor:
    """Batch mean of ``0.5 * ||predicted - target||^2`` per row."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape or predicted.ndim != 2:
        raise ShapeMismatch(f"regression_loss: predicted {predicted.shape}, target {target.shape}")
    n = predicted.shape[0]
    if n == 0:
        raise ShapeMismatch("regression_loss: empty batch")
    diff = predicted.data - target
    loss = 0.5 * (diff * diff).sum(axis=1).mean()
    return make_result(np.asarray(loss), (predicted,), lambda g: (diff * (g / n),), "regression_loss")
