"""Differentiable layer primitives used by the CGAP2 network.

Convolutions and max pooling dispatch to the numba kernels; everything
else is plain vectorized numpy. All ops are deterministic and preserve
the dtype of their inputs (float32 for training, float64 for checks).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ShapeError(f"expected 3 components, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ShapeError(f"expected 2 components, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * 2


def _im2col3d(x, kdims, stride, padding, out_dims):
    """[N, C, D, H, W] -> patch matrix [N*OD*OH*OW, C*kd*kh*kw]."""
    n, c = x.shape[:2]
    (kd, kh, kw), (sd, sh, sw), (pd, ph, pw) = kdims, stride, padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    v = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    v = v[:, :, ::sd, ::sh, ::sw]
    od, oh, ow = out_dims
    return np.ascontiguousarray(v.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        n * od * oh * ow, c * kd * kh * kw)


def _fast_conv3d_forward(x, w, b, stride, padding, out_dims):
    """im2col + matmul forward for the float32 training path."""
    n = x.shape[0]
    c_out = w.shape[0]
    patches = _im2col3d(x, w.shape[2:], stride, padding, out_dims)
    out = patches @ w.reshape(c_out, -1).T
    out += b
    return np.ascontiguousarray(
        out.reshape(n, *out_dims, c_out).transpose(0, 4, 1, 2, 3))


def _fast_conv3d_grad_input(gout, w, stride, padding, in_dims):
    """Gradient w.r.t. the input as a stride-1 convolution of the
    zero-dilated output gradient with the flipped, channel-swapped kernel."""
    n = gout.shape[0]
    kd, kh, kw = w.shape[2:]
    od, oh, ow = gout.shape[2:]
    dil = np.zeros((n, gout.shape[1],
                    (od - 1) * stride[0] + 1,
                    (oh - 1) * stride[1] + 1,
                    (ow - 1) * stride[2] + 1), dtype=gout.dtype)
    dil[:, :, ::stride[0], ::stride[1], ::stride[2]] = gout
    pads, crops = [], [slice(None), slice(None)]
    for size, k, s, p, o in zip(in_dims, (kd, kh, kw), stride, padding,
                                (od, oh, ow)):
        rem = size + 2 * p - k - (o - 1) * s  # right-edge remainder lost to striding
        left, right = k - 1 - p, k - 1 - p + rem
        pads.append((max(0, left), max(0, right)))
        # negative pad means cropping instead (padding exceeds kernel - 1)
        crops.append(slice(max(0, -left) or None,
                           -max(0, -right) if right < 0 else None))
    dil = np.pad(dil, ((0, 0), (0, 0), *pads))[tuple(crops)]
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    patches = _im2col3d(dil, (kd, kh, kw), (1, 1, 1), (0, 0, 0), in_dims)
    gin = patches @ w_t.reshape(w_t.shape[0], -1).T
    return np.ascontiguousarray(
        gin.reshape(n, *in_dims, w_t.shape[0]).transpose(0, 4, 1, 2, 3))


def _fast_conv3d_grad_weight(gout, x, w_shape, stride, padding):
    c_out = w_shape[0]
    out_dims = gout.shape[2:]
    patches = _im2col3d(x, w_shape[2:], stride, padding, out_dims)
    gmat = np.ascontiguousarray(gout.transpose(0, 2, 3, 4, 1)).reshape(-1, c_out)
    return (gmat.T @ patches).reshape(w_shape)


def conv3d(input, weight, bias, stride=1, padding=0):
    """3D cross-correlation over [N, C_in, D, H, W].

    Output spatial size per axis is (size + 2*pad - k) // stride + 1.
    No kernel flip is applied. The float64 path accumulates taps in a
    fixed (c_in, kd, kh, kw) order per output element (the oracle
    convention); float32 uses an im2col/matmul fast path.
    """
    stride = _triple(stride)
    padding = _triple(padding)
    if any(s < 1 for s in stride):
        raise ShapeError(f"stride components must be >= 1, got {stride}")
    if input.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input/weight, got {input.shape} and {weight.shape}")
    n, c_in, d, h, w = input.shape
    c_out, c_in_w, kd, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeError(f"input channels {c_in} != weight channels {c_in_w}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    out_dims = []
    for size, k, s, p in zip((d, h, w), (kd, kh, kw), stride, padding):
        if size + 2 * p < k:
            raise ShapeError(f"kernel {k} does not fit padded input {size + 2 * p}")
        o = (size + 2 * p - k) // s + 1
        if o <= 0:
            raise ShapeError(f"non-positive output dimension {o}")
        out_dims.append(o)
    exact = input.dtype == np.float64
    w_data = weight.data.astype(input.dtype, copy=False)
    b_data = bias.data.astype(input.dtype, copy=False)
    if exact:
        out = np.zeros((n, c_out, *out_dims), dtype=input.dtype)
        kernels.conv3d_forward(input.data, w_data, b_data, *stride, *padding, out)
    else:
        out = _fast_conv3d_forward(input.data, w_data, b_data, stride, padding, out_dims)

    def backward(g):
        g = np.ascontiguousarray(g)
        ginp = gw = gb = None
        if input.requires_grad:
            if exact:
                ginp = np.zeros_like(input.data)
                kernels.conv3d_grad_input(g, w_data, *stride, *padding, ginp)
            else:
                ginp = _fast_conv3d_grad_input(g, w_data, stride, padding, (d, h, w))
        if weight.requires_grad:
            if exact:
                gw = np.zeros_like(weight.data)
                kernels.conv3d_grad_weight(g, input.data, *stride, *padding, gw)
            else:
                gw = _fast_conv3d_grad_weight(g, input.data, weight.shape, stride, padding)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return ginp, gw, gb

    return Tensor.from_op(out, (input, weight, bias), backward)


def conv2d(input, weight, bias, stride=1, padding=0):
    """2D cross-correlation, routed through conv3d with a depth-1 axis so
    the two stay bit-identical."""
    stride = _pair(stride)
    padding = _pair(padding)
    if input.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {input.shape} and {weight.shape}")
    n, c_in, h, w = input.shape
    c_out, _, kh, kw = weight.shape
    inp5 = input.reshape(n, c_in, 1, h, w)
    w5 = weight.reshape(c_out, weight.shape[1], 1, kh, kw)
    out5 = conv3d(inp5, w5, bias, stride=(1, *stride), padding=(0, *padding))
    _, _, _, oh, ow = out5.shape
    return out5.reshape(n, c_out, oh, ow)


def maxpool3d(input, window, stride=None):
    """Windowed max over [N, C, D, H, W]; gradient routes to the first
    maximum in row-major scan order within each window."""
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    n, c, d, h, w = input.shape
    out_dims = []
    for size, k, s in zip((d, h, w), window, stride):
        if k > size:
            raise ShapeError(f"pool window {k} larger than input {size}")
        out_dims.append((size - k) // s + 1)
    out = np.empty((n, c, *out_dims), dtype=input.dtype)
    argmax = np.empty((n, c, *out_dims), dtype=np.int64)
    kernels.maxpool3d_forward(input.data, *window, *stride, out, argmax)

    def backward(g):
        ginp = np.zeros_like(input.data)
        kernels.maxpool3d_grad(np.ascontiguousarray(g), argmax, ginp)
        return (ginp,)

    return Tensor.from_op(out, (input,), backward)


def batchnorm3d(input, gamma, beta, running_mean, running_var, mode="train",
                eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over [N, C, D, H, W].

    Train mode normalizes with biased batch statistics and updates the
    running arrays in place; eval mode normalizes with the running stats.
    """
    n, c, d, h, w = input.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    x = input.data
    if mode == "train":
        m = n * d * h * w
        if m < 2:
            raise ShapeError("batchnorm train mode needs >= 2 elements per channel")
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    elif mode == "eval":
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    mean_b = mean.reshape(1, c, 1, 1, 1)
    ivstd = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1, 1).astype(x.dtype)
    xhat = (x - mean_b) * ivstd
    out = gamma.data.reshape(1, c, 1, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1, 1)

    def backward(g):
        axes = (0, 2, 3, 4)
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        if not input.requires_grad:
            return None, ggamma, gbeta
        gxhat = g * gamma.data.reshape(1, c, 1, 1, 1)
        if mode == "eval":
            return gxhat * ivstd, ggamma, gbeta
        m = n * d * h * w
        sum_gxhat = gxhat.sum(axis=axes, keepdims=True)
        sum_gxhat_xhat = (gxhat * xhat).sum(axis=axes, keepdims=True)
        ginp = (gxhat - sum_gxhat / m - xhat * sum_gxhat_xhat / m) * ivstd
        return ginp, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (input, gamma, beta), backward)


def upsample_nearest3d(input, factor):
    """Nearest-neighbor upsampling by integer factors per spatial axis;
    the gradient sums over each replication group."""
    fd, fh, fw = _triple(factor)
    if min(fd, fh, fw) < 1:
        raise ShapeError(f"upsample factors must be >= 1, got {(fd, fh, fw)}")
    n, c, d, h, w = input.shape
    out = np.repeat(np.repeat(np.repeat(input.data, fd, axis=2), fh, axis=3), fw, axis=4)

    def backward(g):
        g6 = g.reshape(n, c, d, fd, h, fh, w, fw)
        return (g6.sum(axis=(3, 5, 7)),)

    return Tensor.from_op(out, (input,), backward)


def linear(input, weight, bias):
    """Affine map: input [N, F_in] x weight [F_out, F_in] + bias [F_out]."""
    if input.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {input.shape[1]} != weight features {weight.shape[1]}")
    out = input.data @ weight.data.T + bias.data

    def backward(g):
        ginp = g @ weight.data if input.requires_grad else None
        gw = g.T @ input.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return ginp, gw, gb

    return Tensor.from_op(out, (input, weight, bias), backward)


def relu(input):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = input.data > 0
    out = input.data * mask
    return Tensor.from_op(out, (input,), lambda g: (g * mask,))


def concat_channels(a, b, axis):
    """Concatenate two tensors along ``axis``; the gradient splits back."""
    sa, sb = list(a.shape), list(b.shape)
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch {a.shape} vs {b.shape}")
    for ax, (da, db) in enumerate(zip(sa, sb)):
        if ax != axis and da != db:
            raise ShapeError(f"shapes {a.shape} and {b.shape} differ off the concat axis {axis}")
    out = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def l1_pose_loss(predicted, target):
    """Sum of absolute joint-coordinate errors per sample, averaged over
    the batch. Operands are [N, 17, 3]; the subgradient at exact ties is 0."""
    if predicted.shape != target.shape:
        raise ShapeError(f"pose shapes differ: {predicted.shape} vs {target.shape}")
    if predicted.data.ndim != 3 or predicted.shape[1] != 17:
        raise ShapeError(f"expected [N, 17, 3] poses, got {predicted.shape}")
    n = predicted.shape[0]
    diff = predicted.data - target.data
    out = np.abs(diff).sum() / n

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s.astype(predicted.dtype, copy=False), (-s).astype(predicted.dtype, copy=False)

    return Tensor.from_op(np.asarray(out, dtype=predicted.dtype), (predicted, target), backward)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits),
    computed with the max-subtraction stabilization."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected logits [N, K] with N labels, got {logits.shape} and {labels.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    out = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Tensor.from_op(np.asarray(out, dtype=logits.dtype), (logits,), backward)


def softmax_probs(logits):
    """Row-wise softmax of a [N, K] tensor (inference helper, no graph)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soft_argmax3d(heatmap):
    """Expected (d, h, w) coordinate of softmax(heatmap) per joint.

    Input is [N, J, D, H, W]; output is [N, J, 3] in voxel units. A
    millimeter mapping, when needed, is applied by the caller as an
    affine transform of the result.
    """
    if heatmap.data.ndim != 5:
        raise ShapeError(f"soft_argmax3d expects [N, J, D, H, W], got {heatmap.shape}")
    n, j, d, h, w = heatmap.shape
    flat = heatmap.data.reshape(n, j, d * h * w)
    z = flat - flat.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)
    dd, hh, ww = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([dd.ravel(), hh.ravel(), ww.ravel()]).astype(heatmap.dtype)  # [3, DHW]
    out = np.einsum("njv,cv->njc", p, coords)

    def backward(g):
        # d out_c / d logit_v = p_v * (coord_cv - out_c)
        inner = np.einsum("njc,cv->njv", g, coords) - np.einsum("njc,njc->nj", g, out)[..., None]
        return ((p * inner).reshape(heatmap.shape).astype(heatmap.dtype, copy=False),)

    return Tensor.from_op(out, (heatmap,), backward)


def voxel_to_world(coords, volume_min, volume_max, grid_dims):
    """Affine map from voxel coordinates to millimeter space.

    Voxel 0 maps to volume_min and voxel (dim - 1) to volume_max, per axis.
    Differentiable through ``coords``.
    """
    vol_min = np.asarray(volume_min, dtype=coords.dtype)
    vol_max = np.asarray(volume_max, dtype=coords.dtype)
    dims = np.asarray(grid_dims, dtype=coords.dtype)
    scale = (vol_max - vol_min) / np.maximum(dims - 1.0, 1.0)
    return coords * Tensor(scale) + Tensor(vol_min)


def world_to_voxel(points, volume_min, volume_max, grid_dims):
    """Inverse of :func:`voxel_to_world` on plain arrays."""
    vol_min = np.asarray(volume_min, dtype=np.float64)
    vol_max = np.asarray(volume_max, dtype=np.float64)
    dims = np.asarray(grid_dims, dtype=np.float64)
    scale = (vol_max - vol_min) / np.maximum(dims - 1.0, 1.0)
    return (np.asarray(points) - vol_min) / scale
