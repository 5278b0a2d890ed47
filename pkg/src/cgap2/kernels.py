"""Numba kernels for the convolution and pooling hot loops.

For every output element the forward convolution accumulates taps in
(c_in, kd, kh, kw) order, so results are bit-identical to a naive
nested-loop reference with the same inner ordering; the bias is added
after all taps. The row-innermost loop layout only vectorizes across
output positions, it never reorders the per-element sum. Padding taps
are skipped by clamping ranges; the naive reference skips the same
zero-pad taps, so the accumulated-term sequence is identical. Keep those
properties when touching these loops.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath=False)


@_jit
def _trange(k_off, stride, pad, in_size, out_size):
    """Output-index range [lo, hi) for which input index
    ow * stride - pad + k_off stays inside [0, in_size)."""
    base = k_off - pad
    lo = 0
    if base < 0:
        lo = (-base + stride - 1) // stride
    hi = (in_size - 1 - base) // stride + 1
    if hi > out_size:
        hi = out_size
    if lo > hi:
        lo = hi
    return base, lo, hi


@_jit
def conv3d_forward(inp, weight, bias, sd, sh, sw, pd, ph, pw, out):
    n_batch, c_in, in_d, in_h, in_w = inp.shape
    c_out, _, k_d, k_h, k_w = weight.shape
    _, _, out_d, out_h, out_w = out.shape
    for n in range(n_batch):
        for co in range(c_out):
            for od in range(out_d):
                for oh in range(out_h):
                    row = out[n, co, od, oh]
                    for ci in range(c_in):
                        for kd in range(k_d):
                            id_ = od * sd - pd + kd
                            if id_ < 0 or id_ >= in_d:
                                continue
                            for kh in range(k_h):
                                ih = oh * sh - ph + kh
                                if ih < 0 or ih >= in_h:
                                    continue
                                in_row = inp[n, ci, id_, ih]
                                for kw in range(k_w):
                                    base, lo, hi = _trange(kw, sw, pw, in_w, out_w)
                                    wv = weight[co, ci, kd, kh, kw]
                                    for ow in range(lo, hi):
                                        row[ow] += wv * in_row[base + ow * sw]
                    for ow in range(out_w):
                        row[ow] += bias[co]


@_jit
def conv3d_grad_input(gout, weight, sd, sh, sw, pd, ph, pw, ginp):
    n_batch, c_in, in_d, in_h, in_w = ginp.shape
    c_out, _, k_d, k_h, k_w = weight.shape
    _, _, out_d, out_h, out_w = gout.shape
    for n in range(n_batch):
        for co in range(c_out):
            for od in range(out_d):
                for oh in range(out_h):
                    g_row = gout[n, co, od, oh]
                    for ci in range(c_in):
                        for kd in range(k_d):
                            id_ = od * sd - pd + kd
                            if id_ < 0 or id_ >= in_d:
                                continue
                            for kh in range(k_h):
                                ih = oh * sh - ph + kh
                                if ih < 0 or ih >= in_h:
                                    continue
                                gi_row = ginp[n, ci, id_, ih]
                                for kw in range(k_w):
                                    base, lo, hi = _trange(kw, sw, pw, in_w, out_w)
                                    wv = weight[co, ci, kd, kh, kw]
                                    for ow in range(lo, hi):
                                        gi_row[base + ow * sw] += wv * g_row[ow]


@_jit
def conv3d_grad_weight(gout, inp, sd, sh, sw, pd, ph, pw, gweight):
    n_batch, c_in, in_d, in_h, in_w = inp.shape
    c_out, _, k_d, k_h, k_w = gweight.shape
    _, _, out_d, out_h, out_w = gout.shape
    for n in range(n_batch):
        for co in range(c_out):
            for od in range(out_d):
                for oh in range(out_h):
                    g_row = gout[n, co, od, oh]
                    for ci in range(c_in):
                        for kd in range(k_d):
                            id_ = od * sd - pd + kd
                            if id_ < 0 or id_ >= in_d:
                                continue
                            for kh in range(k_h):
                                ih = oh * sh - ph + kh
                                if ih < 0 or ih >= in_h:
                                    continue
                                in_row = inp[n, ci, id_, ih]
                                for kw in range(k_w):
                                    base, lo, hi = _trange(kw, sw, pw, in_w, out_w)
                                    acc = gweight[co, ci, kd, kh, kw] * 0
                                    for ow in range(lo, hi):
                                        acc += g_row[ow] * in_row[base + ow * sw]
                                    gweight[co, ci, kd, kh, kw] += acc


@_jit
def maxpool3d_forward(inp, wd, wh, ww, sd, sh, sw, out, argmax):
    n_batch, c, in_d, in_h, in_w = inp.shape
    _, _, out_d, out_h, out_w = out.shape
    for n in range(n_batch):
        for ci in range(c):
            for od in range(out_d):
                for oh in range(out_h):
                    for ow in range(out_w):
                        best = -np.inf
                        best_idx = -1
                        # row-major scan; strict > keeps the first maximum on ties
                        for kd in range(wd):
                            id_ = od * sd + kd
                            for kh in range(wh):
                                ih = oh * sh + kh
                                for kw in range(ww):
                                    iw = ow * sw + kw
                                    v = inp[n, ci, id_, ih, iw]
                                    if v > best:
                                        best = v
                                        best_idx = (id_ * in_h + ih) * in_w + iw
                        out[n, ci, od, oh, ow] = best
                        argmax[n, ci, od, oh, ow] = best_idx


@_jit
def maxpool3d_grad(gout, argmax, ginp):
    n_batch, c, in_d, in_h, in_w = ginp.shape
    _, _, out_d, out_h, out_w = gout.shape
    for n in range(n_batch):
        for ci in range(c):
            for od in range(out_d):
                for oh in range(out_h):
                    for ow in range(out_w):
                        idx = argmax[n, ci, od, oh, ow]
                        iw = idx % in_w
                        ih = (idx // in_w) % in_h
                        id_ = idx // (in_w * in_h)
                        ginp[n, ci, id_, ih, iw] += gout[n, ci, od, oh, ow]
