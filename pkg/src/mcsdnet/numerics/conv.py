"""Convolution and pooling on ``[B, C, H, W]`` tensors.

Convolutions are cross-correlations (no kernel flip).  Both directions go
through an im2col / col2im pair so forward and backward share one indexing
scheme.
"""
from __future__ import annotations

import numpy as np

from .ops import DTypeError, ShapeError
from .tensor import Tensor


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh, kw, stride, dil, oh, ow) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        hi = i * dil
        for j in range(kw):
            wj = j * dil
            cols[:, :, i, j] = xp[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh, kw, stride, dil, oh, ow) -> np.ndarray:
    b, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    hspan = stride * (oh - 1) + 1
    wspan = stride * (ow - 1) + 1
    for i in range(kh):
        hi = i * dil
        for j in range(kw):
            wj = j * dil
            out[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride] += cols[:, :, i, j]
    return out


def _check_dtypes(*ts):
    dts = {t.dtype for t in ts if t is not None}
    if len(dts) > 1:
        raise DTypeError(f"dtype mismatch among conv operands: {sorted(map(str, dts))}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[B, Cin, H, W]`` and ``weight`` is ``[Cout, Cin, kH, kW]``.
    Output spatial size is ``(H + 2p - d(k-1) - 1) // s + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("stride and dilation must be positive, padding nonnegative")
    _check_dtypes(x, weight, bias)
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"input has {cin} channels but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output size {oh}x{ow} is not positive")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wmat = weight.data.reshape(cout, -1)
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xp.reshape(b, cin, h * w)
    else:
        cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(b, cout, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if pointwise:
                gxp = gcols.reshape(xp.shape)
            else:
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, dilation, oh, ow)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, inputs, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution (no padding), the adjoint of :func:`conv2d`.

    ``weight`` is ``[Cin, Cout, kH, kW]``; output size is ``(H - 1) * stride + kH``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects rank-4 tensors, got {x.shape}, {weight.shape}")
    if stride < 1:
        raise ShapeError("stride must be positive")
    _check_dtypes(x, weight, bias)
    b, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"input has {cin} channels but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    oh = (h - 1) * stride + kh
    ow = (w - 1) * stride + kw
    wmat = weight.data.reshape(cin, cout * kh * kw)
    xs = x.data.reshape(b, cin, h * w)
    cols = np.matmul(wmat.T, xs)
    out = _col2im(cols, (b, cout, oh, ow), kh, kw, stride, 1, h, w)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gx = gw = gb = None
        gcols = _im2col(g, kh, kw, stride, 1, h, w)
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xs, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, inputs, backward, "conv_transpose2d")


def maxpool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` max pooling.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    b, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {factor}")
    f = factor
    oh, ow = h // f, w // f
    win = x.data.reshape(b, c, oh, f, ow, f).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, f * f)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, oh, ow, f, f).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "maxpool2d")


def pooling_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row ``i`` averages input cells ``floor(i*n/m) .. ceil((i+1)*n/m) - 1``."""
    p = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pooling to a fixed output size.

    Output cell ``(i, j)`` is the mean over rows ``floor(i*H/oh)`` up to
    ``ceil((i+1)*H/oh)`` (exclusive) and the matching column range, so
    ``(1, 1)`` is a global mean and ``(H, W)`` is the identity.
    """
    b, c, h, w = x.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"output size {out_h}x{out_w} must lie within input size {h}x{w}")
    ph = pooling_matrix(h, out_h, x.dtype)
    pw = pooling_matrix(w, out_w, x.dtype)
    out = ph @ x.data @ pw.T

    def backward(g):
        return (ph.T @ g @ pw,)

    return Tensor._from_op(out, (x,), backward, "adaptive_avg_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel into a ``factor x factor`` block."""
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward, "upsample_nearest")


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Expand a ``[N, C, 1, 1]`` map to ``[N, C, h, w]``."""
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"expected 1x1 spatial extent, got {x.shape}")
    out = np.broadcast_to(x.data, x.shape[:2] + (h, w)).copy()
    return Tensor._from_op(out, (x,), lambda g: (g.sum(axis=(2, 3), keepdims=True),), "broadcast_spatial")
