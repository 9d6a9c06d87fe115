"""Differentiable operations on rank-4 feature maps ``[N, C, F, T]`` and friends.

Each function computes its forward result with numpy and attaches a closure
that maps the output gradient to one gradient per tensor input.  Inputs that
do not require a gradient get ``None`` and their backward work is skipped.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..errors import ConfigError
from .tensor import Tensor, as_tensor, make_result

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _need(t: Optional[Tensor]) -> bool:
    return t is not None and t.requires_grad


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# --------------------------------------------------------------------------
# convolution and pooling


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=(1, 1),
    padding=(0, 0),
    groups: int = 1,
) -> Tensor:
    """2D cross-correlation over ``[N, Cin, F, T]`` with weight ``[Cout, Cin/g, kF, kT]``.

    Dense kernels unfold the padded input into a ``[Cin*kF*kT, N*Fo*To]``
    matrix so forward and both backward products are single GEMMs; 1x1
    kernels multiply the input in place.  Depthwise layers
    (``groups == Cin == Cout``) reduce to per-channel scaling per offset.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    sF, sT = _pair(stride)
    pF, pT = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    N, Cin, F, T = x.shape
    Cout, Cg, kF, kT = weight.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise ConfigError(f"conv2d: in_channels={Cin} and out_channels={Cout} must be divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ConfigError(f"conv2d: weight expects {Cg * groups} input channels (groups={groups}), input has {Cin}")
    if bias is not None and as_tensor(bias).shape != (Cout,):
        raise ConfigError(f"conv2d: bias shape {as_tensor(bias).shape} != ({Cout},)")
    if min(sF, sT) < 1 or min(pF, pT) < 0:
        raise ConfigError(f"conv2d: invalid stride {(sF, sT)} or padding {(pF, pT)}")
    if kF > F + 2 * pF or kT > T + 2 * pT:
        raise ConfigError(f"conv2d: kernel {(kF, kT)} larger than padded input {(F + 2 * pF, T + 2 * pT)}")
    Fo = conv_output_size(F, kF, sF, pF)
    To = conv_output_size(T, kT, sT, pT)
    P = Fo * To

    xp = np.pad(x.data, ((0, 0), (0, 0), (pF, pF), (pT, pT))) if (pF or pT) else x.data
    w = weight.data
    dtype = x.dtype
    if Cg == 1 and groups == Cin and Cout == Cin:
        mode = "depthwise"
    elif groups == 1 and kF == kT == 1 and sF == sT == 1:
        mode = "pointwise"
    elif groups == 1:
        mode = "im2col"
    else:
        mode = "grouped"

    def window(i: int, j: int) -> tuple:
        return (slice(None), slice(None), slice(i, i + sF * (Fo - 1) + 1, sF), slice(j, j + sT * (To - 1) + 1, sT))

    def im2col() -> np.ndarray:
        # rows ordered (Cin, kF, kT) to match weight.reshape(Cout, -1); columns (N, Fo, To)
        xpt = xp.transpose(1, 0, 2, 3)
        col = np.empty((Cin, kF, kT, N, Fo, To), dtype=dtype)
        for i in range(kF):
            for j in range(kT):
                col[:, i, j] = xpt[window(i, j)]
        return col.reshape(Cin * kF * kT, N * P)

    if mode == "depthwise":
        out = np.zeros((N, Cout, Fo, To), dtype=dtype)
        for i in range(kF):
            for j in range(kT):
                out += w[:, 0, i, j].reshape(1, Cout, 1, 1) * xp[window(i, j)]
    elif mode == "pointwise":
        w2 = np.ascontiguousarray(w.reshape(Cout, Cin))
        out = np.matmul(w2, x.data.reshape(N, Cin, P)).reshape(N, Cout, Fo, To)
    elif mode == "im2col":
        w2 = np.ascontiguousarray(w.reshape(Cout, -1))
        out = (w2 @ im2col()).reshape(Cout, N, Fo, To).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
    else:
        # per-offset weight matrices [kF, kT, g, Cout/g, Cin/g]
        wk = np.ascontiguousarray(w.reshape(groups, Cout // groups, Cg, kF, kT).transpose(3, 4, 0, 1, 2))
        out = np.zeros((N, groups, Cout // groups, P), dtype=dtype)
        for i in range(kF):
            for j in range(kT):
                xs = np.ascontiguousarray(xp[window(i, j)]).reshape(N, groups, Cg, P)
                out += np.matmul(wk[i, j], xs)
        out = out.reshape(N, Cout, Fo, To)
    if bias is not None:
        out += as_tensor(bias).data.reshape(1, Cout, 1, 1)

    def backward(g: np.ndarray):
        gx = gw = gb = None
        if _need(bias):
            gb = g.sum(axis=(0, 2, 3))
        if mode == "depthwise":
            if _need(weight):
                gw = np.zeros_like(w)
                for i in range(kF):
                    for j in range(kT):
                        gw[:, 0, i, j] = np.einsum("ncft,ncft->c", g, xp[window(i, j)])
            if _need(x):
                gxp = np.zeros_like(xp)
                for i in range(kF):
                    for j in range(kT):
                        gxp[window(i, j)] += w[:, 0, i, j].reshape(1, Cout, 1, 1) * g
                gx = gxp[:, :, pF:pF + F, pT:pT + T]
        elif mode == "pointwise":
            g3 = g.reshape(N, Cout, P)
            if _need(weight):
                gw = np.matmul(g3, x.data.reshape(N, Cin, P).transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if _need(x):
                gx = np.matmul(w2.T, g3).reshape(x.shape)
        elif mode == "im2col":
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, N * P)
            if _need(weight):
                gw = (g2 @ im2col().T).reshape(w.shape)
            if _need(x):
                gcol = (w2.T @ g2).reshape(Cin, kF, kT, N, Fo, To)
                gxpt = np.zeros((Cin, N) + xp.shape[2:], dtype=dtype)
                for i in range(kF):
                    for j in range(kT):
                        gxpt[window(i, j)] += gcol[:, i, j]
                gx = gxpt.transpose(1, 0, 2, 3)[:, :, pF:pF + F, pT:pT + T]
        else:
            gg = g.reshape(N, groups, Cout // groups, P)
            if _need(weight):
                gwk = np.zeros((kF, kT, groups, Cout // groups, Cg), dtype=dtype)
            if _need(x):
                gxp = np.zeros_like(xp)
                wkT = np.ascontiguousarray(wk.transpose(0, 1, 2, 4, 3))
            for i in range(kF):
                for j in range(kT):
                    if _need(weight):
                        xs = np.ascontiguousarray(xp[window(i, j)]).reshape(N, groups, Cg, P)
                        gwk[i, j] = np.matmul(gg, xs.transpose(0, 1, 3, 2)).sum(axis=0)
                    if _need(x):
                        gxp[window(i, j)] += np.matmul(wkT[i, j], gg).reshape(N, Cin, Fo, To)
            if _need(weight):
                gw = np.ascontiguousarray(gwk.transpose(2, 3, 4, 0, 1)).reshape(Cout, Cg, kF, kT)
            if _need(x):
                gx = gxp[:, :, pF:pF + F, pT:pT + T]
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    return make_result(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, kernel=(2, 2), stride=None) -> Tensor:
    """Windowed maximum; backward routes each gradient to the first maximal cell."""
    x = as_tensor(x)
    kF, kT = _pair(kernel)
    sF, sT = _pair(stride if stride is not None else kernel)
    N, C, F, T = x.shape
    if kF > F or kT > T:
        raise ConfigError(f"maxpool2d: kernel {(kF, kT)} larger than input {(F, T)}")
    Fo = (F - kF) // sF + 1
    To = (T - kT) // sT + 1

    def window(i: int, j: int) -> tuple:
        return (slice(None), slice(None), slice(i, i + sF * (Fo - 1) + 1, sF), slice(j, j + sT * (To - 1) + 1, sT))

    out = x.data[window(0, 0)].copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    k = 0
    for i in range(kF):
        for j in range(kT):
            if k:
                cand = x.data[window(i, j)]
                better = cand > out
                np.copyto(out, cand, where=better)
                np.copyto(arg, k, where=better)
            k += 1

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        k = 0
        for i in range(kF):
            for j in range(kT):
                gx[window(i, j)] += g * (arg == k)
                k += 1
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2d")


def freq_avgpool(x: Tensor) -> Tensor:
    """Mean over the frequency axis: ``[N, C, F, T] -> [N, C, 1, T]``."""
    x = as_tensor(x)
    F = x.shape[2]
    out = x.data.mean(axis=2, keepdims=True)

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / F, x.shape).copy(),)

    return make_result(out, (x,), backward, "freq_avgpool")


def broadcast_freq(x: Tensor, F: int) -> Tensor:
    """Replicate a ``[N, C, 1, T]`` map along frequency to ``[N, C, F, T]``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] != 1:
        raise ConfigError(f"broadcast_freq expects [N, C, 1, T], got {x.shape}")
    if F < 1:
        raise ConfigError(f"broadcast_freq: F must be >= 1, got {F}")
    N, C, _, T = x.shape
    out = np.broadcast_to(x.data, (N, C, F, T)).copy()

    def backward(g: np.ndarray):
        return (g.sum(axis=2, keepdims=True),)

    return make_result(out, (x,), backward, "broadcast_freq")


# --------------------------------------------------------------------------
# normalization


_LETTERS = "abcdefgh"


def _reduce_spec(ndim: int, axes: tuple) -> str:
    src = _LETTERS[:ndim]
    kept = "".join(ch for i, ch in enumerate(src) if i not in axes)
    return f"{src},{src}->{kept}"


def _kept_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def _normalize(x: np.ndarray, axes: tuple, eps: float):
    """Return ``(xhat, mean, biased var, 1/sqrt(var + eps))`` over ``axes``."""
    kshape = _kept_shape(x.shape, axes)
    m = x.size // int(np.prod(kshape))
    mean = x.mean(axis=axes, keepdims=True)
    xhat = x - mean
    var = (np.einsum(_reduce_spec(x.ndim, axes), xhat, xhat) / m).reshape(kshape).astype(x.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat *= inv
    return xhat, mean, var, inv


def _normalize_backward(g, xhat, scale, axes, sum_g=None, sum_gx=None) -> np.ndarray:
    """Input gradient of ``scale * xhat`` where ``xhat`` used batch statistics.

    ``scale`` is ``gamma * inv`` broadcast over the kept axes;
    ``sum_g``/``sum_gx`` may be passed in when already computed.
    """
    kshape = _kept_shape(g.shape, axes)
    m = g.size // int(np.prod(kshape))
    if sum_g is None:
        sum_g = g.sum(axis=axes)
    if sum_gx is None:
        sum_gx = np.einsum(_reduce_spec(g.ndim, axes), g, xhat)
    gx = g * scale
    gx -= (scale * (sum_g.reshape(kshape) / m)).astype(g.dtype, copy=False)
    gx -= xhat * (scale * (sum_gx.reshape(kshape) / m)).astype(g.dtype, copy=False)
    return gx


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over ``(N, F, T)``.

    In training mode the batch statistics are used and the running buffers
    are updated in place (the variance buffer tracks the unbiased estimate);
    in eval mode the running buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"batchnorm2d: gamma/beta must have {C} entries, got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ConfigError(f"batchnorm2d: eps must be positive, got {eps}")
    axes = (0, 2, 3)
    shape = (1, C, 1, 1)
    if training:
        xhat, mean, var, inv = _normalize(x.data, axes, eps)
        n = x.data.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(C)
        unbiased = var.reshape(C) * (n / (n - 1)) if n > 1 else var.reshape(C)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var.astype(x.dtype) + x.dtype.type(eps))).reshape(shape)
        xhat = x.data - running_mean.astype(x.dtype).reshape(shape)
        xhat *= inv
    out = xhat * gamma.data.reshape(shape)
    out += beta.data.reshape(shape)

    def backward(g: np.ndarray):
        gb = g.sum(axis=axes)
        gg = np.einsum("ncft,ncft->c", g, xhat)
        gx = None
        if x.requires_grad:
            scale = gamma.data.reshape(shape) * inv
            gx = _normalize_backward(g, xhat, scale, axes, gb, gg) if training else g * scale
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def instance_norm(x: Tensor, axes: tuple, eps: float = 1e-5, op: str = "instance_norm") -> Tensor:
    """Parameter-free normalization over ``axes`` using the input's own statistics."""
    x = as_tensor(x)
    xhat, _, _, inv = _normalize(x.data, axes, eps)

    def backward(g: np.ndarray):
        return (_normalize_backward(g, xhat, inv, axes),)

    return make_result(xhat, (x,), backward, op)


# --------------------------------------------------------------------------
# activations, dropout, dense


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def swish(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g: np.ndarray):
        return (g * (s * (1 + x.data * (1 - s))),)

    return make_result(out, (x,), backward, "swish")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def dropout(
    x: Tensor,
    p: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    style: str = "elementwise",
) -> Tensor:
    """Inverted dropout.

    ``style="channel"`` zeroes whole ``(n, c)`` channels of a rank-4 map
    instead of single elements.  Survivors are scaled by ``1 / (1 - p)``.
    """
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if style not in ("elementwise", "channel"):
        raise ConfigError(f"unknown dropout style {style!r}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an explicit rng")
    if style == "channel":
        mask_shape = x.shape[:2] + (1,) * (x.ndim - 2)
    else:
        mask_shape = x.shape
    mask = (rng.random(mask_shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    out = x.data * mask

    def backward(g: np.ndarray):
        return (g * mask,)

    return make_result(out, (x,), backward, "dropout")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map on the last axis, batched over leading axes."""
    x, weight = as_tensor(x), as_tensor(weight)
    Dout, Din = weight.shape
    if x.shape[-1] != Din:
        raise ConfigError(f"linear: input last axis {x.shape[-1]} != weight in_features {Din}")
    if bias is not None and as_tensor(bias).shape != (Dout,):
        raise ConfigError(f"linear: bias shape {as_tensor(bias).shape} != ({Dout},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, Din)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + as_tensor(bias).data
    out = out.reshape(lead + (Dout,))

    def backward(g: np.ndarray):
        g2 = g.reshape(-1, Dout)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if _need(bias) else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    return make_result(out, parents, backward, "linear")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, labels: Sequence[int], class_weights: Optional[np.ndarray] = None
) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    With ``class_weights`` the mean is weighted: ``sum(w[y] * nll) / sum(w[y])``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ConfigError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    N, K = logits.shape
    if labels.shape != (N,):
        raise ConfigError(f"expected {N} labels, got shape {labels.shape}")
    if N and (labels.min() < 0 or labels.max() >= K):
        raise ConfigError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(N), labels]
    if class_weights is None:
        w = np.full(N, 1.0 / N, dtype=logits.dtype)
    else:
        wy = np.asarray(class_weights, dtype=logits.dtype)[labels]
        w = wy / wy.sum()
    loss = np.asarray((w * nll).sum(), dtype=logits.dtype)

    def backward(g: np.ndarray):
        p = np.exp(z - logsum[:, None])
        p[np.arange(N), labels] -= 1
        return (p * (w[:, None] * g),)

    return make_result(loss, (logits,), backward, "softmax_cross_entropy")


# --------------------------------------------------------------------------
# structural helpers


def add(*xs: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    xs = tuple(as_tensor(x) for x in xs)
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise AssertionError(f"add: shape mismatch {[t.shape for t in xs]}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data

    def backward(g: np.ndarray):
        return tuple(g for _ in xs)

    return make_result(out, xs, backward, "add")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return make_result(out, (x,), backward, "transpose")


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return make_result(out, (x,), backward, "mean")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise AssertionError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    out = x.data * y.data

    def backward(g: np.ndarray):
        return (g * y.data if x.requires_grad else None, g * x.data if y.requires_grad else None)

    return make_result(out, (x, y), backward, "mul")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return make_result(out, (x,), backward, "sum")
