"""Differentiable tensor primitives: conv, batch norm, pooling, maxout, dense, losses.

Public operations take activations in (batch, channel, height, width) layout.
Internally the convolution/pooling/normalization kernels work channels-last,
which keeps the im2col gather contiguous; layer code in `model` calls the
`*_nhwc` kernels directly so a whole forward pass never transposes activations.

Every forward has an exact hand-written backward; `gradcheck` verifies each
one against central finite differences in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Bytes of im2col buffer per GEMM tile. Tiles of a few MB stay cache-resident,
# which matters more than GEMM shape on bandwidth-poor machines.
_COL_TILE_BYTES = 6 << 20


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place that requires finite values."""


def require_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _conv_check(x_channels, filters):
    if filters.ndim != 4 or filters.shape[2:] != (3, 3):
        raise ShapeError(f"filters must be (out,in,3,3), got {filters.shape}")
    if filters.shape[1] != x_channels:
        raise ShapeError(
            f"input has {x_channels} channels but filters expect {filters.shape[1]}"
        )


def _row_tile(n_rows_per_image, channels, itemsize, n_images):
    """Images per im2col tile, so one tile's column buffer fits the cache budget."""
    per_image = n_rows_per_image * 9 * channels * itemsize
    return max(1, min(n_images, _COL_TILE_BYTES // max(per_image, 1)))


def _weights_as_matrix(filters):
    # (O, C, 3, 3) -> (9C, O) with rows ordered (ki, kj, c) to match im2col columns
    o, c = filters.shape[:2]
    return np.ascontiguousarray(filters.transpose(2, 3, 1, 0).reshape(9 * c, o))


def _cols_for(xp_tile, h, w, c):
    # xp_tile: padded (n, h+2, w+2, c) -> (n*h*w, 9c); the copy happens in reshape
    win = sliding_window_view(xp_tile, (3, 3), axis=(1, 2))  # (n,h,w,c,3,3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, 9 * c)


def _pad1(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    out[:, 1:-1, 1:-1, :] = x
    return out


def conv2d_fwd_nhwc(x, filters, bias=None, keep_cols=False):
    """Tiled im2col forward; optionally returns the column tiles for reuse
    by the filter-gradient GEMM in the backward pass."""
    n, h, w, c = x.shape
    _conv_check(c, filters)
    o = filters.shape[0]
    wmat = _weights_as_matrix(filters)
    xp = _pad1(x)
    out = np.empty((n, h, w, o), dtype=x.dtype)
    tile = _row_tile(h * w, c, x.itemsize, n)
    cols_tiles = [] if keep_cols else None
    for i in range(0, n, tile):
        cols = _cols_for(xp[i : i + tile], h, w, c)
        np.matmul(cols, wmat, out=out[i : i + tile].reshape(-1, o))
        if keep_cols:
            cols_tiles.append(cols)
    if bias is not None:
        out += bias
    return out, cols_tiles


def conv2d_nhwc(x, filters, bias):
    """3x3 same-size convolution, stride 1, zero padding 1. x: (N,H,W,C)."""
    out, _ = conv2d_fwd_nhwc(x, filters, bias)
    return out


def conv2d_bwd_nhwc(x, filters, upstream, need_input_grad=True,
                    need_bias_grad=True, cols_tiles=None):
    """Adjoint of the forward. Returns (grad_input, grad_filters, grad_bias).

    With zero padding 1 the input gradient is itself a same-shape 3x3
    convolution: the upstream convolved with channel-transposed, spatially
    flipped filters. That reuses the tiled forward kernel instead of a
    scatter-add col2im. Column tiles kept by the forward avoid rebuilding the
    im2col buffer for the filter-gradient GEMM.
    """
    n, h, w, c = x.shape
    _conv_check(c, filters)
    o = filters.shape[0]
    if upstream.shape != (n, h, w, o):
        raise ShapeError(f"upstream shape {upstream.shape} != {(n, h, w, o)}")
    g_wmat = np.zeros((9 * c, o), dtype=x.dtype)
    tile = _row_tile(h * w, c, x.itemsize, n)
    if cols_tiles is None:
        xp = _pad1(x)
        cols_tiles = (_cols_for(xp[i : i + tile], h, w, c) for i in range(0, n, tile))
    for i, cols in zip(range(0, n, tile), cols_tiles):
        g_wmat += cols.T @ upstream[i : i + tile].reshape(-1, o)
    grad_filters = g_wmat.reshape(3, 3, c, o).transpose(3, 2, 0, 1).copy()
    grad_bias = upstream.sum(axis=(0, 1, 2)) if need_bias_grad else None
    grad_input = None
    if need_input_grad:
        flipped = np.ascontiguousarray(filters.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        grad_input = conv2d_nhwc(upstream, flipped, None)
    return grad_input, grad_filters, grad_bias


def conv2d_backward_nhwc(x, filters, upstream, need_input_grad=True):
    return conv2d_bwd_nhwc(x, filters, upstream, need_input_grad)


def conv2d(x, filters, bias):
    """3x3 convolution on (N,C,H,W) input: zero padding 1, stride 1, same size.

    out[n,o,i,j] = bias[o] + sum_{c,ki,kj} filters[o,c,ki,kj] * xpad[n,c,i+ki,j+kj]
    """
    out = conv2d_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), filters, bias)
    return out.transpose(0, 3, 1, 2)


def conv2d_backward(x, filters, upstream):
    """Gradients of conv2d w.r.t. input, filters and bias."""
    gx, gw, gb = conv2d_backward_nhwc(
        np.ascontiguousarray(x.transpose(0, 2, 3, 1)),
        filters,
        np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)),
    )
    return gx.transpose(0, 3, 1, 2), gw, gb


def batchnorm_nhwc(x, gamma, beta, state, mode, eps=1e-5, momentum=0.9):
    """Per-channel batch normalization over (N,H,W). Returns (out, cache).

    Train mode normalizes with the batch moments (biased variance) and folds
    them into `state` running stats as running = momentum*running + (1-m)*batch.
    Infer mode uses the running stats and returns cache=None.
    """
    if mode == "train":
        c = x.shape[-1]
        m = x.size // c
        if m < 2:
            raise ShapeError("batchnorm train mode needs at least 2 values per channel")
        flat = x.reshape(-1, c)
        mean = flat.sum(axis=0) / m
        var = np.maximum(np.einsum("nc,nc->c", flat, flat) / m - mean * mean, 0)
        inv_std = 1.0 / np.sqrt(var + eps)
        scale = gamma * inv_std
        out = x * scale
        out += beta - mean * scale
        state.update(mean, var, momentum)
        return out, (x, mean, inv_std, gamma, m)
    if mode == "infer":
        mean, var = state.stats()
        scale = gamma / np.sqrt(var + eps)
        return x * scale + (beta - mean * scale), None
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward_nhwc(cache, upstream):
    """Adjoint of the train-mode normalization (mean/variance terms included).

    Written in the expanded form gx = a*upstream + b*x + const per channel,
    which needs two reductions and three elementwise passes.
    """
    if cache is None:
        raise ValueError("batchnorm_backward requires a train-mode cache")
    x, mean, inv_std, gamma, m = cache
    c = upstream.shape[-1]
    up_flat = upstream.reshape(-1, c)
    sum_up = up_flat.sum(axis=0)
    sum_upx = np.einsum("nc,nc->c", up_flat, x.reshape(-1, c))
    centered_dot = sum_upx - mean * sum_up  # sum of upstream * (x - mean)
    grad_gamma = centered_dot * inv_std
    grad_beta = sum_up
    a = gamma * inv_std
    b = -a * inv_std * inv_std * centered_dot / m
    gx = upstream * a
    gx += x * b
    gx -= (a * sum_up + b * mean * m) / m
    return gx, grad_gamma, grad_beta


class BatchNormState:
    """Running mean/variance shared by train-mode updates and infer mode."""

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.updates = 0

    def update(self, mean, var, momentum):
        self.running_mean *= momentum
        self.running_mean += (1.0 - momentum) * mean
        self.running_var *= momentum
        self.running_var += (1.0 - momentum) * var
        self.updates += 1

    def stats(self):
        if self.updates == 0:
            raise RuntimeError("batchnorm infer mode before any train-mode update")
        return self.running_mean, self.running_var


def batchnorm(x, gamma, beta, state, mode, eps=1e-5, momentum=0.9):
    """Batch normalization on (N,C,H,W) input; see batchnorm_nhwc."""
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    out, cache = batchnorm_nhwc(xt, gamma, beta, state, mode, eps, momentum)
    return out.transpose(0, 3, 1, 2), cache


def batchnorm_backward(cache, upstream):
    up = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1))
    gx, gg, gb = batchnorm_backward_nhwc(cache, up)
    return gx.transpose(0, 3, 1, 2), gg, gb


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))  # row-major window order


def maxpool2d_nhwc(x):
    """2x2 max pooling, stride 2. Returns (out, argmax), argmax indexing the
    window cells 0..3 in row-major order; ties keep the first cell."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    out = x[:, 0::2, 0::2, :].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for k, (i, j) in enumerate(_POOL_OFFSETS[1:], start=1):
        cell = x[:, i::2, j::2, :]
        arg = np.where(cell > out, np.int8(k), arg)
        np.maximum(out, cell, out=out)
    return out, arg


def maxpool2d_backward_nhwc(arg, input_shape, upstream):
    gx = np.zeros(input_shape, dtype=upstream.dtype)
    for k, (i, j) in enumerate(_POOL_OFFSETS):
        gx[:, i::2, j::2, :] = np.where(arg == k, upstream, 0)
    return gx


def maxpool2d(x):
    """2x2/stride-2 max pooling on (N,C,H,W); ties resolve to the first cell."""
    out, arg = maxpool2d_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
    return out.transpose(0, 3, 1, 2), arg


def maxpool2d_backward(arg, input_shape, upstream):
    n, c, h, w = input_shape
    up = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1))
    gx = maxpool2d_backward_nhwc(arg, (n, h, w, c), up)
    return gx.transpose(0, 3, 1, 2)


def maxout(branches):
    """Elementwise maximum over K same-shaped tensors.

    Returns (out, argmax branch index per element); ties pick the lowest index.
    """
    if len(branches) < 2:
        raise ShapeError("maxout needs at least 2 branches")
    shape = branches[0].shape
    for b in branches[1:]:
        if b.shape != shape:
            raise ShapeError(f"maxout branch shapes differ: {shape} vs {b.shape}")
    out = branches[0].copy()
    arg = np.zeros(shape, dtype=np.int8)
    for i, b in enumerate(branches[1:], start=1):
        arg = np.where(b > out, np.int8(i), arg)
        np.maximum(out, b, out=out)
    return out, arg


def maxout_backward(arg, n_branches, upstream):
    """Routes the upstream gradient to the winning branch of each element."""
    return [np.where(arg == i, upstream, 0) for i in range(n_branches)]


def fully_connected(x, weights, bias):
    """Affine map on (N,D) input: x @ weights + bias."""
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input dim {x.shape[1]} != weight rows {weights.shape[0]}")
    return x @ weights + bias


def fully_connected_backward(x, weights, upstream):
    if upstream.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"upstream shape {upstream.shape} does not match output")
    return upstream @ weights.T, x.T @ upstream, upstream.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    return np.where(x > 0, upstream, 0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, grad_logits) with grad = (softmax - onehot) / N. Computed
    with max-subtraction so large logits stay finite.
    """
    n, n_classes = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad
