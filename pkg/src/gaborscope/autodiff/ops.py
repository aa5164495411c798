"""Differentiable operators.

Sequence tensors are channel-last: ``(batch, time, channels)``.  Convolution
weights are stored ``(out_channels, in_channels, kernel)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return Tensor._make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


# -- shape ----------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = all(isinstance(i, (int, slice)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.array(x.data[idx]), (x,), backward, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for a 2-D or batched left operand and a 2-D right operand."""
    a, b = _pair(a, b)
    if b.ndim != 2:
        raise ValueError(f"matmul right operand must be 2-D, got shape {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def dense(x, weight, bias=None) -> Tensor:
    """Fully connected layer; ``weight`` is ``(in, out)``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum whose every input index survives in the output or the other operand."""
    a, b = _pair(a, b)
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        missing = set(s) - set(out) - set(other)
        if missing:
            raise ValueError(f"einsum index {missing} is reduced inside a single operand")

    def backward(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return Tensor._make(np.einsum(subscripts, a.data, b.data, optimize=True), (a, b), backward, "einsum")


# -- convolution ----------------------------------------------------------

def _col2im(dcols: np.ndarray, length: int) -> np.ndarray:
    """Adjoint of ``sliding_window_view(x, K, axis=1)`` for ``(B, T', C, K)`` windows."""
    B, Tout, C, K = dcols.shape
    dx = np.zeros((B, length, C), dtype=dcols.dtype)
    for k in range(K):
        dx[:, k:k + Tout, :] += dcols[:, :, :, k]
    return dx


def conv1d(x, weight, bias=None, padding: str = "valid") -> Tensor:
    """Stride-1 multi-channel correlation.

    ``x`` is ``(B, T, C)``, ``weight`` is ``(O, C, K)``; output is ``(B, T', O)``
    with ``T' = T - K + 1`` for ``valid`` and ``T' = T`` for ``same`` (odd K).
    """
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    if x.ndim != 3 or weight.ndim != 3:
        raise ValueError(f"conv1d expects (B,T,C) input and (O,C,K) weight, got {x.shape}, {weight.shape}")
    O, C, K = weight.shape
    if x.shape[2] != C:
        raise ValueError(f"conv1d channel mismatch: input has {x.shape[2]}, weight expects {C}")
    if padding == "same":
        if K % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        pad = (K - 1) // 2
        xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    elif padding == "valid":
        pad = 0
        xp = x.data
    else:
        raise ValueError(f"unknown padding {padding!r}")
    B, Tp, _ = xp.shape
    if Tp < K:
        raise ValueError(f"input length {x.shape[1]} shorter than kernel {K}")
    Tout = Tp - K + 1
    if K == 1:
        cols = xp.reshape(B * Tout, C)
    else:
        cols = sliding_window_view(xp, K, axis=1).reshape(B * Tout, C * K)
    w2 = weight.data.reshape(O, C * K)
    out = (cols @ w2.T).reshape(B, Tout, O)

    def backward(g):
        g2 = g.reshape(B * Tout, O)
        gx = gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(O, C, K)
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(B, Tout, C, K)
            dxp = dcols[..., 0] if K == 1 else _col2im(dcols, Tp)
            gx = dxp[:, pad:pad + x.shape[1], :] if pad else dxp
        return gx, gw

    res = Tensor._make(out, (x, weight), backward, "conv1d")
    return res if bias is None else add(res, bias)


def cross_correlate1d(x, kernels) -> Tensor:
    """Valid correlation of single-channel signals with a bank of kernels.

    ``x`` is ``(B, T)``, ``kernels`` is ``(N, K)``; output ``(B, T-K+1, N)`` with
    ``out[b, t, i] = sum_k kernels[i, k] * x[b, t + k]``.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels, dtype=x.dtype)
    if x.ndim != 2 or kernels.ndim != 2:
        raise ValueError(f"cross_correlate1d expects (B,T) and (N,K), got {x.shape}, {kernels.shape}")
    B, T = x.shape
    N, K = kernels.shape
    if T < K:
        raise ValueError(f"input length {T} shorter than kernel {K}")
    Tout = T - K + 1
    # contiguous frames keep the product on the BLAS path
    frames = np.ascontiguousarray(sliding_window_view(x.data, K, axis=1)).reshape(B * Tout, K)
    out = (frames @ kernels.data.T).reshape(B, Tout, N)

    def backward(g):
        gx = gk = None
        if kernels.requires_grad:
            gk = g.reshape(B * Tout, N).T @ frames
        if x.requires_grad:
            gx = _col2im((g @ kernels.data)[:, :, None, :], T)[:, :, 0]
        return gx, gk

    return Tensor._make(out, (x, kernels), backward, "cross_correlate1d")


# -- pooling / normalization / regularization -------------------------------

def maxpool1d(x, window: int, stride: int | None = None) -> Tensor:
    """Max over time windows of ``(B, T, C)``; a trailing remainder is dropped.

    Ties go to the earliest position in the window.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    B, T, C = x.shape
    if T < window:
        raise ValueError(f"maxpool window {window} longer than input {T}")
    n = (T - window) // stride + 1
    if stride == window:
        win = x.data[:, :n * window].reshape(B, n, window, C)
        slot = lambda j: win[:, :, j, :]  # noqa: E731
    else:
        view = sliding_window_view(x.data, window, axis=1)[:, ::stride][:, :n]  # (B, n, C, w)
        slot = lambda j: view[..., j]  # noqa: E731
    out = slot(0).copy()
    for j in range(1, window):
        np.maximum(out, slot(j), out=out)

    def backward(g):
        gx = np.zeros_like(x.data)
        g4 = np.empty((B, n, window, C), dtype=x.dtype) if stride == window else None
        taken = np.zeros(out.shape, dtype=bool)
        for j in range(window):
            hit = slot(j) == out
            hit &= ~taken
            taken |= hit
            if g4 is not None:
                np.multiply(g, hit, out=g4[:, :, j, :])
            else:
                # overlapping windows share samples, so accumulate
                np.add.at(gx, (slice(None), np.arange(n) * stride + j), g * hit)
        if g4 is not None:
            gx[:, :n * window] = g4.reshape(B, n * window, C)
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool1d")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batchnorm1d(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates the running
    estimates (unbiased variance); eval mode is the fixed affine map given by
    the running statistics.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma, dtype=x.dtype)
    beta = as_tensor(beta, dtype=x.dtype)
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes]))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
        unbiased = var * m / max(m - 1, 1)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return Tensor._make(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm1d")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- recurrent ------------------------------------------------------------

def lstm_cell(x, h, c, w_ih, w_hh, b):
    """One LSTM step. Gate order along the ``4H`` axis: input, forget, cell, output."""
    H = h.shape[-1]
    z = add(add(matmul(x, w_ih), matmul(h, w_hh)), b)
    i = sigmoid(z[:, 0:H])
    f = sigmoid(z[:, H:2 * H])
    g = tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:4 * H])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_layer(x, params, hidden_size: int, reverse: bool = False):
    """Stacked unidirectional LSTM over ``x`` of shape ``(B, L, D)``.

    ``params`` is a list with one ``(w_ih, w_hh, b)`` triple per layer
    (``w_ih``: ``(D_in, 4H)``, ``w_hh``: ``(H, 4H)``, ``b``: ``(4H,)``).  With
    ``reverse`` the sequence is consumed right-to-left.  Returns the top
    layer's hidden states ``(B, L, H)`` in consumption order and its final
    hidden state ``(B, H)``.  Initial states are zero.
    """
    x = as_tensor(x)
    B, L, _ = x.shape
    steps = [x[:, t, :] for t in (range(L - 1, -1, -1) if reverse else range(L))]
    for w_ih, w_hh, b in params:
        h = Tensor(np.zeros((B, hidden_size), dtype=x.dtype))
        c = Tensor(np.zeros((B, hidden_size), dtype=x.dtype))
        outs = []
        for xt in steps:
            h, c = lstm_cell(xt, h, c, w_ih, w_hh, b)
            outs.append(h)
        steps = outs
    return stack(steps, axis=1), steps[-1]


# -- loss -----------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, classes) -> Tensor:
    """Mean of ``-log softmax(logits)[class]`` over the batch."""
    logits = as_tensor(logits)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    lg = logits.data.reshape(-1, logits.shape[-1])
    if len(classes) != lg.shape[0]:
        raise ValueError(f"{len(classes)} classes for {lg.shape[0]} logit rows")
    logp = log_softmax(lg)
    rows = np.arange(len(classes))
    loss = -logp[rows, classes].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, classes] -= 1.0
        return ((g * p / len(classes)).reshape(logits.shape).astype(logits.dtype),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")

