"""Spatial ops on NCHW tensors: convolution, pooling, nearest upsampling."""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor, as_tensor, make_op


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    Args:
        x: (N, C, H, W) input.
        weight: (O, C, K, K) filters.
        bias: optional (O,) offsets.
        stride: 1 or 2 in this codebase, any positive int works.
        padding: zero padding on every border.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise NumericError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise NumericError(f"conv2d: input has {c} channels, weight expects {cw}")
    if stride < 1 or padding < 0:
        raise NumericError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise NumericError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise NumericError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride == 1 and c >= 16:
        out, backward_core = _conv_shifted(xh, weight.data, n, c, o, kh, kw, ho, wo)
    else:
        out, backward_core = _conv_im2col(xh, weight.data, n, c, o, kh, kw, ho, wo, stride)
    if bias is not None:
        out += bias.data
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        gxp, gw = backward_core(gh, x.requires_grad, weight.requires_grad)
        gb = gh.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if gxp is not None:
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, backward, "conv2d")


def _conv_shifted(xh, wt, n, c, o, kh, kw, ho, wo):
    """Stride-1 conv as kh*kw matmuls over one flattened padded batch.

    Pixel (b, y, x) of the padded NHWC input is row ``(b*Hp + y)*Wp + x``, so
    every kernel tap is a contiguous row slice. Outputs are computed on the
    whole padded grid and cropped; junk rows read into the zero tail.
    """
    _, hp, wp, _ = xh.shape
    m = n * hp * wp
    tail = (kh - 1) * wp + (kw - 1)
    flat = np.zeros((m + tail, c))
    flat[:m] = xh.reshape(m, c)
    taps = [np.ascontiguousarray(wt[:, :, i, j].T) for i in range(kh) for j in range(kw)]  # (c, o)
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    acc = flat[offsets[0] : offsets[0] + m] @ taps[0]
    for off, tap in zip(offsets[1:], taps[1:]):
        acc += flat[off : off + m] @ tap
    out = acc.reshape(n, hp, wp, o)[:, :ho, :wo, :]

    def backward_core(gh, need_x, need_w):
        gfull = np.zeros((n, hp, wp, o))
        gfull[:, :ho, :wo, :] = gh
        gflat = gfull.reshape(m, o)
        gx = gw = None
        if need_w:
            gw = np.empty((o, c, kh, kw))
            for (off, _), idx in zip(zip(offsets, taps), np.ndindex(kh, kw)):
                gw[:, :, idx[0], idx[1]] = gflat.T @ flat[off : off + m]
        if need_x:
            gxf = np.zeros((m + tail, c))
            for off, tap in zip(offsets, taps):
                gxf[off : off + m] += gflat @ tap.T
            gx = gxf[:m].reshape(n, hp, wp, c)
        return gx, gw

    return out, backward_core


def _conv_im2col(xh, wt, n, c, o, kh, kw, ho, wo, stride):
    _, hp, wp, _ = xh.shape
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = wt.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)

    def backward_core(gh, need_x, need_w):
        gm = gh.reshape(-1, o)
        gx = gw = None
        if need_w:
            gw = (gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if need_x:
            dcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, c)
            gx = np.zeros((n, hp, wp, c))
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
        return gx, gw

    return out, backward_core


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise NumericError(f"upsample_nearest: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    f = int(factor)
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward, "upsample_nearest")


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; H and W must be divisible by k."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise NumericError(f"avg_pool2d: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise NumericError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k))
        return (g6.reshape(n, c, h, w),)

    return make_op(out, (x,), backward, "avg_pool2d")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight shaped (in, out)."""
    out = as_tensor(x) @ weight
    return out + bias if bias is not None else out
