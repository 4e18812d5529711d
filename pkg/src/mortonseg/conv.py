"""Volumetric convolution primitives on the autodiff tape.

Layout convention: activations are channels-first without a batch axis,
(C, D, H, W). The optimizer sees one crop at a time, so batching is the
caller's loop, not a tensor axis.

conv3d uses im2col: the padded input is unfolded into a (C_in*k^3, V)
column matrix and the kernel applied as a single matmul. Spatial padding
is fixed at k//2, so with odd k the output grid is ceil(extent/stride)
along each axis; stride 1 preserves shape and stride 2 halves it (odd
extents round up).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def conv_out_extent(extent: int, stride: int) -> int:
    """Output extent of conv3d along one axis (pad=k//2, odd k)."""
    return (extent - 1) // stride + 1


def _unfold(xp: np.ndarray, k: int, stride: int, out_sp: tuple) -> np.ndarray:
    """(C, Dp, Hp, Wp) padded volume -> (C, k, k, k, V) columns."""
    c = xp.shape[0]
    od, oh, ow = out_sp
    cols = np.empty((c, k, k, k, od * oh * ow), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                view = xp[:, a:a + stride * od:stride,
                          b:b + stride * oh:stride,
                          cc:cc + stride * ow:stride]
                cols[:, a, b, cc, :] = view.reshape(c, -1)
    return cols


def _fold_add(gcols: np.ndarray, pad_shape: tuple, k: int, stride: int,
              out_sp: tuple) -> np.ndarray:
    """Adjoint of _unfold: scatter-add columns back into a padded volume."""
    gpad = np.zeros(pad_shape, dtype=gcols.dtype)
    c = pad_shape[0]
    od, oh, ow = out_sp
    for a in range(k):
        for b in range(k):
            for cc in range(k):
                gpad[:, a:a + stride * od:stride,
                     b:b + stride * oh:stride,
                     cc:cc + stride * ow:stride] += \
                    gcols[:, a, b, cc, :].reshape(c, od, oh, ow)
    return gpad


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3-D convolution, pad=k//2.

    x: (C_in, D, H, W); w: (C_out, C_in, k, k, k); b: (C_out,).
    Returns (C_out, ceil(D/s), ceil(H/s), ceil(W/s)).
    """
    cin, d, h, wd = x.shape
    cout, cin_w, k, k2, k3 = w.shape
    if cin != cin_w or k != k2 or k != k3:
        raise ValueError(f"kernel {w.shape} does not match input {x.shape}")
    if b.shape != (cout,):
        raise ValueError("bias shape must be (C_out,)")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    p = k // 2
    out_sp = tuple(conv_out_extent(e, stride) for e in (d, h, wd))

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    cols = _unfold(xp, k, stride, out_sp)         # (Cin,k,k,k,V)
    cols2 = cols.reshape(cin * k * k * k, -1)     # (Cin*k^3, V)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols2 + b.data[:, None]).reshape(cout, *out_sp)

    pad_shape = xp.shape

    def bwd(g):
        g2 = g.reshape(cout, -1)
        gb = g2.sum(axis=1)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(cin, k, k, k, -1)
        gpad = _fold_add(gcols, pad_shape, k, stride, out_sp)
        if p:
            gx = gpad[:, p:p + d, p:p + h, p:p + wd]
        else:
            gx = gpad
        return (np.ascontiguousarray(gx), gw, gb)

    return Tensor._make(out, (x, w, b), bwd, "conv3d")


def dwconv1d_causal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal 1-D convolution over a (L, E) sequence.

    y[t, e] = b[e] + sum_j w[e, j] * x[t - (k-1) + j, e], zero history.
    Position t never sees positions after t.
    """
    ln, e = x.shape
    ew, k = w.shape
    if ew != e or b.shape != (e,):
        raise ValueError("weight/bias extents do not match the sequence")
    xp = np.concatenate([np.zeros((k - 1, e), dtype=x.data.dtype), x.data])
    out = np.broadcast_to(b.data, (ln, e)).copy()
    for j in range(k):
        out += xp[j:j + ln] * w.data[:, j]

    def bwd(g):
        gb = g.sum(axis=0)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gw[:, j] = (g * xp[j:j + ln]).sum(axis=0)
            gxp[j:j + ln] += g * w.data[:, j]
        return (gxp[k - 1:], gw, gb)

    return Tensor._make(out, (x, w, b), bwd, "dwconv1d")


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat each voxel factor^3 times; adjoint sums each block."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    c, d, h, w = x.shape
    f = factor
    out = x.data.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)

    def bwd(g):
        return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)

    return Tensor._make(out, (x,), bwd, "upsample3d")
