"""Differentiable primitives used by the model.

All spatial ops take NCHW arrays. Convolution and pooling are expressed
through strided window views so forward and backward share one layout.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, make_result

LN_EPS = 1e-5


def _out_size(size: int, window: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - window) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _tap(a: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Slice of ``a`` (..., Hp, Wp) seen by kernel tap (i, j) at every output position."""
    return a[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _check_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects NCHW input, got {x.ndim}-d shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_nchw(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (out, in, kh, kw), got shape {kernel.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d input has {c} channels but kernel expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    # channel-major im2col: cols[c, i, j, b, y, x] = xp[b, c, y*s + i, x*s + j]
    xp = _pad(x.data, padding).transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = _tap(xp, i, j, ho, wo, stride)
    cols = cols.reshape(c * kh * kw, -1)
    kmat = kernel.data.reshape(o, -1)
    out = (kmat @ cols).reshape(o, b, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if kernel.requires_grad:
            kernel.accumulate((gm @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(gm.sum(axis=1))
        if x.requires_grad:
            gcols = (kmat.T @ gm).reshape(c, kh, kw, b, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    _tap(gxp, i, j, ho, wo, stride)[...] += gcols[:, i, j]
            x.accumulate(gxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward)


def avg_pool2d(x: Tensor, window: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Mean over each window; zero padding is excluded from the divisor."""
    _check_nchw(x, "avg_pool2d")
    if window < 1:
        raise ShapeError(f"avg_pool2d window must be >= 1, got {window}")
    _, _, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeError(f"avg_pool2d window {window} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _out_size(h, window, stride, padding), _out_size(w, window, stride, padding)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, w), dtype=x.dtype), padding)
    total = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
    counts = np.zeros((1, 1, ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            total += _tap(xp, i, j, ho, wo, stride)
            counts += _tap(ones, i, j, ho, wo, stride)
    out = total / counts

    def backward(g):
        share = g / counts
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                _tap(gxp, i, j, ho, wo, stride)[...] += share
        x.accumulate(gxp[:, :, padding:padding + h, padding:padding + w])

    return make_result(out, (x,), backward)


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over each window; ties send the gradient to the first index (row-major)."""
    _check_nchw(x, "max_pool2d")
    stride = window if stride is None else stride
    if window < 1:
        raise ShapeError(f"max_pool2d window must be >= 1, got {window}")
    _, _, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"max_pool2d window {window} larger than input {h}x{w}")
    ho, wo = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    taps = [(i, j) for i in range(window) for j in range(window)]
    out = _tap(x.data, 0, 0, ho, wo, stride).copy()
    for i, j in taps[1:]:
        np.maximum(out, _tap(x.data, i, j, ho, wo, stride), out=out)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in taps:
            first = (_tap(x.data, i, j, ho, wo, stride) == out) & ~taken
            taken |= first
            _tap(gx, i, j, ho, wo, stride)[...] += np.where(first, g, 0)
        x.accumulate(gx)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ (W * M).T + b`` for ``x`` of shape (B, in) and ``W`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input has {x.shape[1]} features but weight expects {weight.shape[1]}")
    mask = weight.mask if isinstance(weight, Parameter) else None
    w_eff = weight.data if mask is None else np.where(mask, weight.data, weight.dtype.type(0))
    out = x.data @ w_eff.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data

    def backward(g):
        if weight.requires_grad:
            gw = g.T @ x.data
            weight.accumulate(gw if mask is None else np.where(mask, gw, gw.dtype.type(0)))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ w_eff)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def backward(g):
        x.accumulate(g * active)

    return make_result(np.where(active, x.data, x.dtype.type(0)), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)

    def backward(g):
        x.accumulate(g * out * (1 - out))

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        x.accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = LN_EPS) -> Tensor:
    """Normalize each sample over the last (feature) axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gain is not None and gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data if gain is not None else g
            x.accumulate(inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    parents = tuple(t for t in (x, gain, bias) if t is not None)
    return make_result(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return x.mean(axis=(2, 3))


def cross_entropy(logits: Tensor, labels, class_weights: Optional[Sequence[float]] = None,
                  smoothing: float = 0.0) -> Tensor:
    """Class-weighted, label-smoothed cross entropy.

    The target row is ``(1 - smoothing) * onehot + smoothing / C`` and the
    batch reduction is ``sum(w_i * loss_i) / sum(w_i)`` with
    ``w_i = class_weights[label_i]``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got shape {logits.shape}")
    if not 0 <= smoothing < 1:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    batch, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise ValueError(f"label {bad} outside [0, {n_classes})")
    if class_weights is None:
        cw = np.ones(n_classes, dtype=logits.dtype)
    else:
        cw = np.asarray(class_weights, dtype=logits.dtype)
        if cw.shape != (n_classes,):
            raise ShapeError(f"class_weights has length {cw.size}, expected {n_classes}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full((batch, n_classes), smoothing / n_classes, dtype=logits.dtype)
    target[np.arange(batch), labels] += 1 - smoothing
    sample_w = cw[labels]
    norm = sample_w.sum()
    per_sample = -(target * logp).sum(axis=1)
    loss = np.asarray((sample_w * per_sample).sum() / norm, dtype=logits.dtype)

    def backward(g):
        logits.accumulate(g * (sample_w / norm)[:, None] * (np.exp(logp) - target))

    return make_result(loss, (logits,), backward)


def gaussian_noise(shape, sigma: float, rng, dtype=np.float32) -> Tensor:
    """I.i.d. N(0, sigma^2) samples drawn from ``rng`` (an RngStream)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)
    return Tensor(rng.normal(0.0, sigma, shape).astype(dtype), dtype=dtype)
