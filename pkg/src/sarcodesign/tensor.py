"""Dense tensor kernels with hand-derived reverse-mode gradients.

Feature maps are ``N x C x H x W`` (a bare ``C x H x W`` map is promoted to a
batch of one), conv weights are ``O x I x K x K`` and fully connected weights
are ``out x in``.  Every forward kernel returns ``(output, cache)`` and the
matching backward kernel consumes that cache.

The kernels keep the dtype of their inputs: the training path runs in float32,
gradient checks may feed float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a sliding window: ``floor((size + 2*pad - k) / stride) + 1``."""
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------- conv


@dataclass(frozen=True)
class ConvCache:
    windows: np.ndarray  # N x C x Ho x Wo x K x K view into the padded input
    weight: np.ndarray
    input_shape: tuple[int, ...]
    stride: int
    padding: int
    squeezed: bool


def conv2d_fwd(x, weight, bias, stride: int = 1, padding: int = 0):
    x, squeezed = _as_batch(x, 4)
    weight = np.asarray(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv weight must be O x I x K x K, got {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, w_in, k, _ = weight.shape
    if w_in != c_in:
        raise ShapeError(f"C_in mismatch: input has {c_in} channels, weight expects {w_in}")
    if bias is not None and np.shape(bias) != (c_out,):
        raise ShapeError(f"bias must have C_out={c_out} entries, got {np.shape(bias)}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    if k > h + 2 * padding:
        raise ShapeError(f"kernel K={k} exceeds padded height H+2P={h + 2 * padding}")
    if k > w + 2 * padding:
        raise ShapeError(f"kernel K={k} exceeds padded width W+2P={w + 2 * padding}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # contract over (input channel, kernel row, kernel column)
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + np.asarray(bias)[None, :, None, None]
    out = np.ascontiguousarray(out)
    cache = ConvCache(windows, weight, x.shape, stride, padding, squeezed)
    return (out[0] if squeezed else out), cache


def conv2d_bwd(cache: ConvCache | None, grad_out):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    if cache is None:
        raise ValueError("conv2d_bwd needs the cache produced by conv2d_fwd")
    g, _ = _as_batch(grad_out, 4)
    n, c_in, h, w = cache.input_shape
    c_out, _, k, _ = cache.weight.shape
    ho, wo = cache.windows.shape[2:4]
    if g.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_out shape {g.shape} != forward output {(n, c_out, ho, wo)}")
    s, p = cache.stride, cache.padding

    grad_w = np.tensordot(g, cache.windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = g.sum(axis=(0, 2, 3))
    cols = np.tensordot(g, cache.weight, axes=([1], [0]))  # N x Ho x Wo x C x K x K
    gxp = np.zeros((n, c_in, h + 2 * p, w + 2 * p), dtype=np.result_type(g, cache.weight))
    for kh in range(k):
        for kw in range(k):
            gxp[:, :, kh:kh + s * ho:s, kw:kw + s * wo:s] += cols[..., kh, kw].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, p:p + h, p:p + w]
    if cache.squeezed:
        grad_x = grad_x[0]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ------------------------------------------------------------------------ maxpool


@dataclass(frozen=True)
class PoolIndices:
    """Winning positions as flat offsets into each unpadded ``H x W`` plane."""

    flat: np.ndarray  # N x C x Ho x Wo
    input_shape: tuple[int, ...]
    squeezed: bool


def maxpool_fwd(x, k: int, stride: int | None = None, padding: int = 0):
    x, squeezed = _as_batch(x, 4)
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"pool window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if padding * 2 > k:
        raise ShapeError(f"pool padding {padding} must be at most half the window {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat_win = win.reshape(n, c, ho, wo, k * k)
    local = flat_win.argmax(axis=-1)  # first maximum in scan order wins ties
    out = np.take_along_axis(flat_win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // k - padding
    cols = np.arange(wo)[None, :] * stride + local % k - padding
    idx = PoolIndices(rows * w + cols, x.shape, squeezed)
    out = np.ascontiguousarray(out)
    return (out[0] if squeezed else out), idx


def maxpool_bwd(indices: PoolIndices, grad_out):
    g, _ = _as_batch(grad_out, 4)
    n, c, h, w = indices.input_shape
    if g.shape != indices.flat.shape:
        raise ShapeError(f"grad_out shape {g.shape} != pooled shape {indices.flat.shape}")
    grad = np.zeros((n * c, h * w), dtype=g.dtype)
    planes = np.arange(n * c)[:, None]
    np.add.at(grad, (planes, indices.flat.reshape(n * c, -1)), g.reshape(n * c, -1))
    grad = grad.reshape(n, c, h, w)
    return grad[0] if indices.squeezed else grad


# ----------------------------------------------------------------------------- fc


@dataclass(frozen=True)
class FcCache:
    x: np.ndarray
    weight: np.ndarray
    squeezed: bool


def fc_fwd(x, weight, bias):
    x, squeezed = _as_batch(x, 2)
    weight = np.asarray(weight)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"in_features mismatch: input has {x.shape[1]}, weight is {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return (out[0] if squeezed else out), FcCache(x, weight, squeezed)


def fc_bwd(cache: FcCache, grad_out):
    g, _ = _as_batch(grad_out, 2)
    grad_x = g @ cache.weight
    grad_w = g.T @ cache.x
    grad_b = g.sum(axis=0)
    return (grad_x[0] if cache.squeezed else grad_x), grad_w, grad_b


def relu_fwd(x):
    x = np.asarray(x)
    mask = x > 0
    return x * mask, mask


def relu_bwd(mask, grad_out):
    return grad_out * mask


# ---------------------------------------------------------------------- batchnorm


@dataclass(frozen=True)
class BnCache:
    xhat: np.ndarray
    gamma: np.ndarray
    inv_std: np.ndarray
    axes: tuple[int, ...]
    mode: str


def _bn_bcast(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_fwd(x, gamma, beta, running_mean, running_var, mode: str = "eval",
                  momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch normalisation over ``N x C [x H x W]`` input.

    Returns ``(out, cache, (new_running_mean, new_running_var))``.  In train
    mode the batch statistics normalise the input and the running statistics
    are blended with ``momentum``; eval mode uses the running statistics and
    returns them unchanged.
    """
    x = np.asarray(x)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects N x C or N x C x H x W, got {x.shape}")
    if np.shape(gamma) != (x.shape[1],):
        raise ShapeError(f"gamma must have C={x.shape[1]} entries, got {np.shape(gamma)}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        new_stats = (
            ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype),
            ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype),
        )
    elif mode == "eval":
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_bcast(mean, x.ndim)) * _bn_bcast(inv_std, x.ndim)
    out = _bn_bcast(gamma, x.ndim) * xhat + _bn_bcast(beta, x.ndim)
    return out.astype(np.result_type(x, gamma)), BnCache(xhat, gamma, inv_std, axes, mode), new_stats


def batchnorm_bwd(cache: BnCache, grad_out):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    g = np.asarray(grad_out)
    nd = g.ndim
    grad_gamma = (g * cache.xhat).sum(axis=cache.axes)
    grad_beta = g.sum(axis=cache.axes)
    scale = _bn_bcast(cache.gamma * cache.inv_std, nd)
    if cache.mode == "eval":
        return g * scale, grad_gamma, grad_beta
    m = g.size // g.shape[1]
    grad_x = scale / m * (m * g - _bn_bcast(grad_beta, nd) - cache.xhat * _bn_bcast(grad_gamma, nd))
    return grad_x, grad_gamma, grad_beta


def fuse_batchnorm(conv_weight, conv_bias, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    """Fold eval-mode batch norm into the preceding conv/FC weights.

    Works for any weight whose leading axis is the output channel.
    """
    conv_weight = np.asarray(conv_weight)
    if conv_bias is None:
        conv_bias = np.zeros(conv_weight.shape[0], dtype=conv_weight.dtype)
    scale = np.asarray(gamma) / np.sqrt(np.asarray(running_var) + eps)
    w = conv_weight * scale.reshape((-1,) + (1,) * (conv_weight.ndim - 1))
    b = (np.asarray(conv_bias) - running_mean) * scale + beta
    return w.astype(conv_weight.dtype), b.astype(conv_weight.dtype)


# ------------------------------------------------------------------------- losses


def softmax_xent(logits, labels, reduction: str = "mean"):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    ``reduction`` is ``"mean"`` (batch average), ``"sum"`` or ``"none"``; with
    ``"sum"``/``"none"`` each row of the gradient is that sample's own gradient.
    """
    z = np.asarray(logits)
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z.shape[0])
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        loss, grad = losses.mean(), grad / z.shape[0]
    elif reduction == "sum":
        loss = losses.sum()
    elif reduction == "none":
        loss = losses
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if single:
        grad = grad[0]
        if reduction == "none":
            loss = loss[0]
    return loss, grad.astype(z.dtype)
